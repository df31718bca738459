//! Small dense MLPs with recorded forward passes and hand-written adjoints.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    pub(crate) fn to_tag(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Values saved by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpRecord {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

impl MlpParams {
    /// Validates that consecutive layer shapes chain.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return Err(Error::Config(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && layers[i - 1].outputs != layer.inputs {
                return Err(Error::Config(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    layer.inputs,
                    i - 1,
                    layers[i - 1].outputs
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Fan-in uniform initialization `U(±√(6/fan_in))`, zero biases.
    pub fn initialized<R: Rng>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert_eq!(widths.len(), activations.len() + 1);
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let mut layer = Layer::zeros(w[0], w[1], activation);
                for x in layer.weight.iter_mut() {
                    *x = rng.gen_range(-bound..bound);
                }
                layer
            })
            .collect();
        Self { layers }
    }

    /// Same architecture with every weight and bias zero (gradient accumulators).
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs, l.activation))
                .collect(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_len(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    /// Weights then bias, layer by layer.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Inverse of [`flatten_into`](Self::flatten_into); returns the number of values consumed.
    pub fn assign_from(&mut self, values: &[f64]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.copy_from_slice(&values[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        at
    }

    /// Elementwise `self += other`; architectures must match.
    pub fn accumulate(&mut self, other: &MlpParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|x| *x = 0.0);
            l.bias.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut y = affine(layer, &x);
            if layer.activation == Activation::Relu {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = y;
        }
        Ok(x)
    }

    pub fn forward_recorded(&self, input: &[f64]) -> Result<(Vec<f64>, MlpRecord)> {
        self.check_input(input)?;
        let mut record = MlpRecord {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.to_vec();
        for layer in &self.layers {
            let pre = affine(layer, &x);
            let y = match layer.activation {
                Activation::Relu => pre.iter().map(|v| v.max(0.0)).collect(),
                Activation::None => pre.clone(),
            };
            record.inputs.push(x);
            record.pre.push(pre);
            x = y;
        }
        Ok((x, record))
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/d(input)`.
    pub fn backward(&self, record: &MlpRecord, d_output: &[f64], grads: &mut MlpParams) -> Vec<f64> {
        let mut upstream = d_output.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let pre = &record.pre[li];
            let input = &record.inputs[li];
            if layer.activation == Activation::Relu {
                for (g, &p) in upstream.iter_mut().zip(pre) {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let g_layer = &mut grads.layers[li];
            let mut d_input = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let g = upstream[o];
                if g == 0.0 {
                    continue;
                }
                g_layer.bias[o] += g;
                let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                let g_row = &mut g_layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for i in 0..layer.inputs {
                    g_row[i] += g * input[i];
                    d_input[i] += g * row[i];
                }
            }
            upstream = d_input;
        }
        upstream
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(Error::Config(format!(
                "MLP expects {} inputs, got {}",
                self.input_len(),
                input.len()
            )));
        }
        Ok(())
    }
}

fn affine(layer: &Layer, x: &[f64]) -> Vec<f64> {
    (0..layer.outputs)
        .map(|o| {
            let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
            layer.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let mut layer = Layer::zeros(3, 3, Activation::None);
        for i in 0..3 {
            layer.weight[i * 3 + i] = 1.0;
        }
        let mlp = MlpParams::new(vec![layer]).unwrap();
        assert_eq!(mlp.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn relu_clamps_negative_bias() {
        let mut layer = Layer::zeros(1, 1, Activation::Relu);
        layer.bias[0] = -1.0;
        let mlp = MlpParams::new(vec![layer]).unwrap();
        assert_eq!(mlp.forward(&[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn matches_plain_matrix_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mlp = MlpParams::initialized(&[5, 7, 3], &[Activation::Relu, Activation::None], &mut rng);
        let input: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Oracle: nested-loop evaluation written against the raw layer arrays.
        let l0 = &mlp.layers[0];
        let l1 = &mlp.layers[1];
        let mut hidden = [0.0; 7];
        for o in 0..7 {
            let mut acc = l0.bias[o];
            for i in 0..5 {
                acc += l0.weight[o * 5 + i] * input[i];
            }
            hidden[o] = if acc > 0.0 { acc } else { 0.0 };
        }
        let mut expected = [0.0; 3];
        for o in 0..3 {
            let mut acc = l1.bias[o];
            for i in 0..7 {
                acc += l1.weight[o * 7 + i] * hidden[i];
            }
            expected[o] = acc;
        }
        let out = mlp.forward(&input).unwrap();
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let mlp = MlpParams::new(vec![Layer::zeros(2, 2, Activation::None)]).unwrap();
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::Config(_))));
        assert!(MlpParams::new(vec![
            Layer::zeros(2, 3, Activation::Relu),
            Layer::zeros(4, 1, Activation::None)
        ])
        .is_err());
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = MlpParams::initialized(&[4, 3], &[Activation::None], &mut rng);
        let input = [0.5, -1.0, 2.0, 0.25];
        let (_, record) = mlp.forward_recorded(&input).unwrap();
        let mut grads = mlp.zeros_like();
        mlp.backward(&record, &[1.0, 1.0, 1.0], &mut grads);
        for o in 0..3 {
            for i in 0..4 {
                assert_eq!(grads.layers[0].weight[o * 4 + i], input[i]);
            }
            assert_eq!(grads.layers[0].bias[o], 1.0);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = MlpParams::initialized(&[3, 4, 2], &[Activation::Relu, Activation::None], &mut rng);
        let (_, record) = mlp.forward_recorded(&[0.1, 0.2, 0.3]).unwrap();
        let mut grads = mlp.zeros_like();
        let d_in = mlp.backward(&record, &[0.0, 0.0], &mut grads);
        assert!(d_in.iter().all(|&x| x == 0.0));
        let mut flat = Vec::new();
        grads.flatten_into(&mut flat);
        assert!(flat.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = MlpParams::initialized(&[4, 6, 3], &[Activation::Relu, Activation::None], &mut rng);
        let input: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights = [0.3, -1.2, 0.7];
        let loss = |m: &MlpParams, x: &[f64]| -> f64 {
            m.forward(x).unwrap().iter().zip(&weights).map(|(y, w)| y * w).sum()
        };
        let (_, record) = mlp.forward_recorded(&input).unwrap();
        let mut grads = mlp.zeros_like();
        let d_in = mlp.backward(&record, &weights, &mut grads);

        let mut flat = Vec::new();
        mlp.flatten_into(&mut flat);
        let fd = finite_difference_gradient(
            |p| {
                let mut m = mlp.clone();
                m.assign_from(p);
                loss(&m, &input)
            },
            &flat,
            1e-6,
        )
        .unwrap();
        let mut analytic = Vec::new();
        grads.flatten_into(&mut analytic);
        for (a, n) in analytic.iter().zip(&fd) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
        let fd_in = finite_difference_gradient(|x| loss(&mlp, x), &input, 1e-6).unwrap();
        for (a, n) in d_in.iter().zip(&fd_in) {
            assert!((a - n).abs() < 1e-7);
        }
    }
}
