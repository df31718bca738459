//! PPM images, point dumps and the checkpoint container.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! "SOGS" | u32 version | 5 × section
//! section = [u8; 4] tag | u64 payload length | payload | u32 crc32(payload)
//! ```
//!
//! Sections appear in the order anchors, params, basis, optimizer, config.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::anchor::{Anchor, AnchorField, SecondOrderBasis};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mlp::{Activation, Layer, MlpParams};
use crate::model::Model;
use crate::numerics::{EigenPairs, SymMatrix};
use crate::optim::AdamState;
use crate::render::RasterSettings;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SOGS";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encodes an image as binary PPM (`P6`, maxval 255).
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let err = |offset: usize, message: &str| Error::Format {
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err(0, "missing P6 magic"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each header number.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| err(start, "bad header"))?;
        *field = text.parse().map_err(|_| err(start, "header field out of range"))?;
        if i == 2 {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => return Err(err(pos, "expected a single whitespace byte after maxval")),
            }
        }
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(3, "image dimensions must be positive"));
    }
    if maxval != 255 {
        return Err(err(pos.saturating_sub(1), "only maxval 255 is supported"));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| err(3, "image dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(err(
            bytes.len(),
            &format!("payload truncated: {} of {need} bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(err(pos + need, "trailing bytes after the payload"));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(width, height, data)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_ppm(image))?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

/// One `x y z` line per point.
pub fn write_xyz(path: &Path, points: &[[f64; 3]]) -> Result<()> {
    let mut s = String::new();
    for p in points {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Everything needed to resume training or render.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub model: Model,
    pub basis: Option<SecondOrderBasis>,
    /// One state per parameter group, in `ParamGroup::ALL` order.
    pub optimizer: Vec<AdamState>,
    /// `key = value` lines echoing the run configuration.
    pub config: String,
}

const SECTIONS: [(&str, [u8; 4]); 5] = [
    ("anchors", *b"ANCH"),
    ("params", *b"PARM"),
    ("basis", *b"BASI"),
    ("optimizer", *b"OPTM"),
    ("config", *b"CONF"),
];

// Writes to a Vec cannot fail.
fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.write_f64::<LE>(v).unwrap();
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.write_u32::<LE>(v as u32).unwrap();
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.write_u64::<LE>(v).unwrap();
}

fn put_mlp(out: &mut Vec<u8>, mlp: &MlpParams) {
    put_u32(out, mlp.layers.len());
    for l in &mlp.layers {
        put_u32(out, l.inputs);
        put_u32(out, l.outputs);
        out.push(l.activation.to_tag());
        put_f64s(out, &l.weight);
        put_f64s(out, &l.bias);
    }
}

fn encode_anchors(field: &AnchorField) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, field.len() as u64);
    put_u32(&mut out, field.feature_dim());
    put_u32(&mut out, field.offsets_per_anchor());
    for a in &field.anchors {
        put_f64s(&mut out, &a.position);
        put_f64s(&mut out, &a.feature);
        put_f64s(&mut out, &a.scaling);
        for o in &a.offsets {
            put_f64s(&mut out, o);
        }
    }
    out
}

fn encode_params(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, model.m);
    put_u32(&mut out, model.extractors.len());
    for e in &model.extractors {
        put_mlp(&mut out, e);
    }
    put_mlp(&mut out, &model.head);
    let s = &model.settings;
    put_f64s(
        &mut out,
        &[s.dilation, s.near, s.alpha_clip, s.alpha_skip, s.footprint_sigmas],
    );
    put_f64s(&mut out, &model.background);
    out
}

fn encode_basis(basis: Option<&SecondOrderBasis>) -> Vec<u8> {
    let mut out = Vec::new();
    let Some(b) = basis else {
        out.push(0);
        return out;
    };
    out.push(1);
    put_u64(&mut out, b.iteration as u64);
    put_u32(&mut out, b.dim());
    put_u32(&mut out, b.m());
    put_f64s(&mut out, &b.mean);
    put_f64s(&mut out, b.covariance.entries());
    put_f64s(&mut out, b.correlation.entries());
    put_f64s(&mut out, &b.std_devs);
    out.extend(b.degenerate_channels.iter().map(|&d| d as u8));
    out.push(b.sample_degenerate as u8);
    put_f64s(&mut out, &b.eigen.values);
    put_f64s(&mut out, &b.eigen.vectors);
    for p in &b.principal {
        put_f64s(&mut out, p);
    }
    out
}

fn encode_optimizer(iteration: u64, states: &[AdamState]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, iteration);
    put_u32(&mut out, states.len());
    for s in states {
        put_u64(&mut out, s.step);
        put_u64(&mut out, s.len() as u64);
        put_f64s(&mut out, &s.m);
        put_f64s(&mut out, &s.v);
    }
    out
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let payloads = [
        encode_anchors(&ckpt.model.field),
        encode_params(&ckpt.model),
        encode_basis(ckpt.basis.as_ref()),
        encode_optimizer(ckpt.iteration, &ckpt.optimizer),
        ckpt.config.as_bytes().to_vec(),
    ];
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.write_u32::<LE>(CHECKPOINT_VERSION).unwrap();
    for ((_, tag), payload) in SECTIONS.iter().zip(&payloads) {
        out.extend_from_slice(tag);
        put_u64(&mut out, payload.len() as u64);
        out.extend_from_slice(payload);
        out.write_u32::<LE>(crc32fast::hash(payload)).unwrap();
    }
    out
}

/// Reader over one section payload; offsets are reported file-absolute.
struct SectionReader<'a> {
    cursor: Cursor<&'a [u8]>,
    base: u64,
    section: &'static str,
}

impl<'a> SectionReader<'a> {
    fn fail(&self, message: &str) -> Error {
        Error::Format {
            offset: self.base + self.cursor.position(),
            message: format!("{}: {message}", self.section),
        }
    }

    fn short(&self, _: std::io::Error) -> Error {
        self.fail("payload ends early")
    }

    fn u8(&mut self) -> Result<u8> {
        self.cursor.read_u8().map_err(|e| self.short(e))
    }

    fn u32(&mut self) -> Result<usize> {
        self.cursor.read_u32::<LE>().map(|v| v as usize).map_err(|e| self.short(e))
    }

    fn u64(&mut self) -> Result<u64> {
        self.cursor.read_u64::<LE>().map_err(|e| self.short(e))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let remaining = self.cursor.get_ref().len() as u64 - self.cursor.position();
        if (n as u64).saturating_mul(8) > remaining {
            return Err(self.fail(&format!("needs {n} more floats")));
        }
        let mut v = vec![0.0; n];
        self.cursor.read_f64_into::<LE>(&mut v).map_err(|e| self.short(e))?;
        Ok(v)
    }

    fn vec3(&mut self) -> Result<[f64; 3]> {
        let v = self.f64s(3)?;
        Ok([v[0], v[1], v[2]])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(self.fail(&format!("invalid flag byte {other}"))),
        }
    }

    fn mlp(&mut self) -> Result<MlpParams> {
        let n = self.u32()?;
        let mut layers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let inputs = self.u32()?;
            let outputs = self.u32()?;
            let tag = self.u8()?;
            let activation = Activation::from_tag(tag).ok_or_else(|| self.fail(&format!("unknown activation {tag}")))?;
            let weight = self.f64s(inputs.saturating_mul(outputs))?;
            let bias = self.f64s(outputs)?;
            layers.push(Layer {
                inputs,
                outputs,
                weight,
                bias,
                activation,
            });
        }
        MlpParams::new(layers).map_err(|e| self.fail(&e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.cursor.position() as usize != self.cursor.get_ref().len() {
            return Err(self.fail("unexpected bytes at the end of the section"));
        }
        Ok(())
    }
}

fn decode_anchors(r: &mut SectionReader) -> Result<AnchorField> {
    let n = r.u64()? as usize;
    let d = r.u32()?;
    let k = r.u32()?;
    let mut anchors = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let position = r.vec3()?;
        let feature = r.f64s(d)?;
        let scaling = r.vec3()?;
        let offsets = (0..k).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
        anchors.push(Anchor {
            position,
            feature,
            scaling,
            offsets,
        });
    }
    AnchorField::new(anchors, d, k).map_err(|e| r.fail(&e.to_string()))
}

fn decode_params(r: &mut SectionReader, field: AnchorField) -> Result<Model> {
    let m = r.u32()?;
    let count = r.u32()?;
    let extractors = (0..count).map(|_| r.mlp()).collect::<Result<Vec<_>>>()?;
    let head = r.mlp()?;
    let s = r.f64s(5)?;
    let background = r.vec3()?;
    let mut model = Model::new(field, extractors, head, m).map_err(|e| r.fail(&e.to_string()))?;
    model.settings = RasterSettings {
        dilation: s[0],
        near: s[1],
        alpha_clip: s[2],
        alpha_skip: s[3],
        footprint_sigmas: s[4],
    };
    model.background = background;
    Ok(model)
}

fn decode_basis(r: &mut SectionReader) -> Result<Option<SecondOrderBasis>> {
    if !r.flag()? {
        return Ok(None);
    }
    let iteration = r.u64()? as usize;
    let d = r.u32()?;
    let m = r.u32()?;
    let mean = r.f64s(d)?;
    let sym = |r: &mut SectionReader| -> Result<SymMatrix> {
        let e = r.f64s(d.saturating_mul(d))?;
        SymMatrix::new(d, e).map_err(|e| r.fail(&e.to_string()))
    };
    let covariance = sym(r)?;
    let correlation = sym(r)?;
    let std_devs = r.f64s(d)?;
    let degenerate_channels = (0..d).map(|_| r.flag()).collect::<Result<Vec<_>>>()?;
    let sample_degenerate = r.flag()?;
    let values = r.f64s(d)?;
    let vectors = r.f64s(d.saturating_mul(d))?;
    let eigen = EigenPairs::from_parts(d, values, vectors).map_err(|e| r.fail(&e.to_string()))?;
    let principal = (0..m).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
    Ok(Some(SecondOrderBasis {
        iteration,
        mean,
        covariance,
        correlation,
        std_devs,
        degenerate_channels,
        sample_degenerate,
        eigen,
        principal,
    }))
}

fn decode_optimizer(r: &mut SectionReader) -> Result<(u64, Vec<AdamState>)> {
    let iteration = r.u64()?;
    let groups = r.u32()?;
    let mut states = Vec::with_capacity(groups.min(64));
    for _ in 0..groups {
        let step = r.u64()?;
        let len = r.u64()? as usize;
        let m = r.f64s(len)?;
        let v = r.f64s(len)?;
        states.push(AdamState { m, v, step });
    }
    Ok((iteration, states))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        let mut found = [0u8; 4];
        found[..bytes.len()].copy_from_slice(bytes);
        return Err(Error::BadMagic { found });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { found });
    }
    let mut cursor = Cursor::new(bytes);
    cursor.set_position(4);
    let version = cursor.read_u32::<LE>().map_err(|_| Error::Format {
        offset: 4,
        message: "missing version".into(),
    })?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }

    let mut payloads: Vec<(&'static str, u64, &[u8])> = Vec::with_capacity(SECTIONS.len());
    for (name, tag) in SECTIONS {
        let start = cursor.position();
        let truncated = || Error::TruncatedSection {
            section: name,
            offset: start,
        };
        let mut t = [0u8; 4];
        cursor.read_exact(&mut t).map_err(|_| truncated())?;
        if t != tag {
            return Err(Error::Format {
                offset: start,
                message: format!("expected section tag {:?}, found {:?}", tag, t),
            });
        }
        let len = cursor.read_u64::<LE>().map_err(|_| truncated())?;
        let body_start = cursor.position();
        let remaining = bytes.len() as u64 - body_start;
        if len.checked_add(4).is_none_or(|need| need > remaining) {
            return Err(truncated());
        }
        let payload = &bytes[body_start as usize..(body_start + len) as usize];
        cursor.set_position(body_start + len);
        let stored = cursor.read_u32::<LE>().map_err(|_| truncated())?;
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::ChecksumMismatch {
                section: name,
                stored,
                computed,
            });
        }
        payloads.push((name, body_start, payload));
    }
    if cursor.position() as usize != bytes.len() {
        return Err(Error::Format {
            offset: cursor.position(),
            message: "trailing bytes after the last section".into(),
        });
    }

    let reader = |i: usize| SectionReader {
        cursor: Cursor::new(payloads[i].2),
        base: payloads[i].1,
        section: payloads[i].0,
    };
    let mut r = reader(0);
    let field = decode_anchors(&mut r)?;
    r.finish()?;
    let mut r = reader(1);
    let model = decode_params(&mut r, field)?;
    r.finish()?;
    let mut r = reader(2);
    let basis = decode_basis(&mut r)?;
    r.finish()?;
    let mut r = reader(3);
    let (iteration, optimizer) = decode_optimizer(&mut r)?;
    r.finish()?;
    let config = String::from_utf8(payloads[4].2.to_vec()).map_err(|e| Error::Format {
        offset: payloads[4].1 + e.utf8_error().valid_up_to() as u64,
        message: "config: not valid UTF-8".into(),
    })?;
    Ok(Checkpoint {
        iteration,
        model,
        basis,
        optimizer,
        config,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(ckpt))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::refresh_basis;
    use crate::model::{Model, ModelConfig, ParamGroup};

    fn sample_checkpoint(soa: bool) -> Checkpoint {
        let points: Vec<[f64; 3]> = (0..9).map(|i| [i as f64 * 0.3, (i % 3) as f64 * 0.2, -0.1]).collect();
        let cfg = ModelConfig {
            feature_dim: 5,
            m: 2,
            k: 3,
            hidden: 6,
            use_soa: soa,
        };
        let model = Model::initialize(&points, 0.25, &cfg, 3).unwrap();
        let basis = soa.then(|| refresh_basis(&model.field, 2, 4).unwrap());
        let optimizer = ParamGroup::ALL
            .iter()
            .map(|&g| {
                let n = model.group_len(g);
                AdamState {
                    m: (0..n).map(|i| i as f64 * 1e-3).collect(),
                    v: (0..n).map(|i| i as f64 * 1e-6).collect(),
                    step: 4,
                }
            })
            .collect();
        Checkpoint {
            iteration: 4,
            model,
            basis,
            optimizer,
            config: "dim = 5\nseed = 3\n".into(),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        for soa in [true, false] {
            let ckpt = sample_checkpoint(soa);
            let bytes = encode_checkpoint(&ckpt);
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(encode_checkpoint(&back), bytes);
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = encode_checkpoint(&sample_checkpoint(true));
        bytes[4 + 4 + 4 + 8 + 20] ^= 0x01;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::ChecksumMismatch { section: "anchors", .. })
        ));
    }

    #[test]
    fn header_errors_are_distinct() {
        let bytes = encode_checkpoint(&sample_checkpoint(false));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&newer),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::TruncatedSection { section: "config", .. })
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..30]),
            Err(Error::TruncatedSection { section: "anchors", .. })
        ));
    }

    #[test]
    fn ppm_round_trip_within_half_step() {
        let img = Image::from_fn(5, 3, |r, c, ch| ((r * 31 + c * 17 + ch * 7) % 100) as f64 / 99.0);
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        let worst = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 510.0 + 1e-15);
    }

    #[test]
    fn black_two_by_two_layout() {
        let bytes = encode_ppm(&Image::filled(2, 2, [0.0; 3]));
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 12);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        let img = Image::new(1, 1, vec![-0.5, 0.5, 1.5]).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }

    #[test]
    fn malformed_ppm_reports_offsets() {
        let mut bytes = encode_ppm(&Image::filled(4, 4, [0.5; 3]));
        let full = bytes.len();
        bytes.truncate(full - 5);
        match decode_ppm(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, full - 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_ppm(b"P6\n1 x\n255\n"), Err(Error::Format { offset: 5, .. })));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0"), Err(Error::Format { .. })));
        let commented = b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff";
        assert_eq!(decode_ppm(commented).unwrap().pixel(0, 0), [0.0, 128.0 / 255.0, 1.0]);
    }
}
