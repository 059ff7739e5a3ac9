//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "APVR"                          magic, 4 bytes
//! u32 version                     currently 1
//! u32 d1, d2, r, r_prime, C       dimension header
//! u32 activation                  0 = linear, 1 = tanh
//! u32 weighting                   0 = graph, 1 = plain, 2 = uniform
//! u64 seed
//! u32 tensor count
//! per tensor: u64 length, then `length` f64 values (row-major)
//! ```
//!
//! Tensors appear in the order projection (video layers then image layers,
//! weight then bias per layer), attention (L1, L2), classifier (weight,
//! bias), discriminator (weight then bias per layer). Hidden widths are
//! recovered from the tensor lengths.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{
    Activation, AttentionParams, ClassifierParams, Dense, DiscriminatorParams, Mlp, ModelState, Parameters,
    ProjectionParams, Weighting,
};

pub const MAGIC: &[u8; 4] = b"APVR";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &ModelState) -> Vec<u8> {
    let dims = model.dims();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [dims.d1, dims.d2, dims.r, dims.r_prime, dims.categories] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let activation: u32 = match dims.activation {
        Activation::Linear => 0,
        Activation::Tanh => 1,
    };
    let weighting: u32 = match model.weighting {
        Weighting::Graph => 0,
        Weighting::Plain => 1,
        Weighting::Uniform => 2,
    };
    out.extend_from_slice(&activation.to_le_bytes());
    out.extend_from_slice(&weighting.to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    let tensors = model.params.all_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(model: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.offset < n {
            return Err(self.err(format!("unexpected end of file, wanted {n} more bytes")));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Vec<f64>> {
        let len = self.u64()? as usize;
        if len == 0 || len > (self.bytes.len() - self.offset) / 8 {
            return Err(self.err(format!("tensor length {len} does not fit the file")));
        }
        let raw = self.take(len * 8)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(self.err("non-finite parameter"));
        }
        Ok(values)
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let mut rd = Reader { bytes, offset: 0, path };
    if rd.take(4)? != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "bad magic, not an APVR checkpoint".into(),
        });
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(rd.err(format!("unsupported checkpoint version {version}")));
    }
    let mut header = [0usize; 5];
    for h in &mut header {
        *h = rd.u32()? as usize;
    }
    if header.contains(&0) {
        return Err(rd.err(format!("zero dimension in header {header:?}")));
    }
    let [d1, d2, r, r_prime, categories] = header;
    let activation = match rd.u32()? {
        0 => Activation::Linear,
        1 => Activation::Tanh,
        other => return Err(rd.err(format!("unknown activation code {other}"))),
    };
    let weighting = match rd.u32()? {
        0 => Weighting::Graph,
        1 => Weighting::Plain,
        2 => Weighting::Uniform,
        other => return Err(rd.err(format!("unknown weighting code {other}"))),
    };
    let seed = rd.u64()?;
    let count = rd.u32()?;
    if count != 20 {
        return Err(rd.err(format!("expected 20 tensors, found {count}")));
    }

    let mlp = |rd: &mut Reader, depth: usize, input: usize, output: usize, activation: Activation| -> Result<Mlp> {
        let mut layers = Vec::new();
        let mut fan_in = input;
        for l in 0..depth {
            let w = rd.tensor()?;
            let b = rd.tensor()?;
            if w.len() % fan_in != 0 || w.len() / fan_in != b.len() {
                return Err(rd.err(format!("layer {l}: weight length {} inconsistent with fan-in {fan_in} and bias {}", w.len(), b.len())));
            }
            let fan_out = b.len();
            layers.push(Dense {
                weight: Matrix::new(fan_in, fan_out, w)?,
                bias: b,
            });
            fan_in = fan_out;
        }
        if fan_in != output {
            return Err(rd.err(format!("network output width {fan_in}, header says {output}")));
        }
        Ok(Mlp {
            layers,
            hidden_activation: activation,
        })
    };

    let video = mlp(&mut rd, 3, d1, r, activation)?;
    let image = mlp(&mut rd, 3, d2, r, activation)?;
    let l1 = rd.tensor()?;
    let l2 = rd.tensor()?;
    if l1.len() != r * r_prime || l2.len() != r_prime {
        return Err(rd.err("attention tensor sizes disagree with header"));
    }
    let cw = rd.tensor()?;
    let cb = rd.tensor()?;
    if cw.len() != r * categories || cb.len() != categories {
        return Err(rd.err("classifier tensor sizes disagree with header"));
    }
    let disc = mlp(&mut rd, 2, r, 1, Activation::Tanh)?;
    if rd.offset != bytes.len() {
        return Err(rd.err("trailing bytes after last tensor"));
    }
    Ok(ModelState {
        params: Parameters {
            projection: ProjectionParams { video, image },
            attention: AttentionParams {
                l1: Matrix::new(r, r_prime, l1)?,
                l2,
            },
            classifier: ClassifierParams {
                weight: Matrix::new(r, categories, cw)?,
                bias: cb,
            },
            discriminator: DiscriminatorParams { mlp: disc },
        },
        weighting,
        seed,
    })
}
