//! Binary model checkpoints.
//!
//! ```text
//! magic        4 bytes  "DRN1"
//! kind         u32      1 rbm, 2 dbn, 3 mlp, 4 vae
//! aux          u32      rbm/dbn: bit i set when layer i has biases enabled
//!                       mlp: output activation (0 softmax, 1 identity, 2 sigmoid)
//!                       vae: number of encoder layers
//! layer_count  u32
//! dims         layer_count × (rows u32, cols u32)
//! payload      f32, per layer in order
//!                rbm layer:   weights (rows × cols, row-major), hidden bias (cols), visible bias (rows)
//!                dense layer: weights (rows × cols, row-major), bias (cols)
//! ```
//!
//! All integers and floats are little-endian. Parameters are stored at 32-bit
//! precision, so a save→load→save cycle is byte-identical.

use std::path::Path;

use ndarray::Array1;

use crate::dbn::DbnStack;
use crate::dnn::{Dense, Mlp, OutputActivation};
use crate::rbm::Rbm;
use crate::vae::VaeModel;
use crate::{DenseMatrix, Error, Result};

pub const MAGIC: [u8; 4] = *b"DRN1";

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Rbm(Rbm),
    Dbn(DbnStack),
    Mlp(Mlp),
    Vae(VaeModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Rbm(_) => "rbm",
            Model::Dbn(_) => "dbn",
            Model::Mlp(_) => "mlp",
            Model::Vae(_) => "vae",
        }
    }

    fn tag(&self) -> u32 {
        match self {
            Model::Rbm(_) => 1,
            Model::Dbn(_) => 2,
            Model::Mlp(_) => 3,
            Model::Vae(_) => 4,
        }
    }
}

fn kind_name(tag: u32) -> Option<&'static str> {
    Some(match tag {
        1 => "rbm",
        2 => "dbn",
        3 => "mlp",
        4 => "vae",
        _ => return None,
    })
}

fn activation_code(a: OutputActivation) -> u32 {
    match a {
        OutputActivation::Softmax => 0,
        OutputActivation::Identity => 1,
        OutputActivation::Sigmoid => 2,
    }
}

fn activation_from(code: u32) -> Result<OutputActivation> {
    match code {
        0 => Ok(OutputActivation::Softmax),
        1 => Ok(OutputActivation::Identity),
        2 => Ok(OutputActivation::Sigmoid),
        other => Err(Error::InvalidArgument(format!("unknown output activation code {other}"))),
    }
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("dimension {n} does not fit the checkpoint format")))
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn floats<'a>(&mut self, values: impl IntoIterator<Item = &'a f64>) {
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

fn rbm_bias_mask(layers: &[Rbm]) -> Result<u32> {
    if layers.len() > 32 {
        return Err(Error::InvalidArgument("checkpoints hold at most 32 RBM layers".into()));
    }
    Ok(layers
        .iter()
        .enumerate()
        .fold(0u32, |m, (i, l)| m | (u32::from(l.biases_enabled) << i)))
}

/// Serializes `model` to the checkpoint container.
pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let (aux, dims): (u32, Vec<(usize, usize)>) = match model {
        Model::Rbm(r) => (rbm_bias_mask(std::slice::from_ref(r))?, vec![r.weights.dim()]),
        Model::Dbn(s) => (rbm_bias_mask(&s.layers)?, s.layers.iter().map(|l| l.weights.dim()).collect()),
        Model::Mlp(m) => (activation_code(m.output), m.layers.iter().map(|l| l.weights.dim()).collect()),
        Model::Vae(v) => (
            dim_u32(v.encoder.layers.len())?,
            v.encoder.layers.iter().chain(&v.decoder.layers).map(|l| l.weights.dim()).collect(),
        ),
    };
    let mut w = Writer { buf: MAGIC.to_vec() };
    w.u32(model.tag());
    w.u32(aux);
    w.u32(dim_u32(dims.len())?);
    for &(r, c) in &dims {
        w.u32(dim_u32(r)?);
        w.u32(dim_u32(c)?);
    }
    let rbm_payload = |w: &mut Writer, r: &Rbm| {
        w.floats(r.weights.iter());
        w.floats(r.hidden_bias.iter());
        w.floats(r.visible_bias.iter());
    };
    let dense_payload = |w: &mut Writer, l: &Dense| {
        w.floats(l.weights.iter());
        w.floats(l.bias.iter());
    };
    match model {
        Model::Rbm(r) => rbm_payload(&mut w, r),
        Model::Dbn(s) => s.layers.iter().for_each(|r| rbm_payload(&mut w, r)),
        Model::Mlp(m) => m.layers.iter().for_each(|l| dense_payload(&mut w, l)),
        Model::Vae(v) => v
            .encoder
            .layers
            .iter()
            .chain(&v.decoder.layers)
            .for_each(|l| dense_payload(&mut w, l)),
    }
    Ok(w.buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("checkpoint ends inside {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Truncated(what.into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect())
    }

    fn matrix(&mut self, (r, c): (usize, usize)) -> Result<DenseMatrix> {
        let v = self.floats(r * c, "weights")?;
        Ok(DenseMatrix::from_shape_vec((r, c), v).expect("length checked"))
    }
}

/// Parses and validates a checkpoint container.
pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut rd = Reader { bytes, pos: 0 };
    let magic = rd.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: u32::from_be_bytes(MAGIC),
            found: u32::from_be_bytes([magic[0], magic[1], magic[2], magic[3]]),
        });
    }
    let tag = rd.u32("kind")?;
    let aux = rd.u32("aux")?;
    let count = rd.u32("layer count")? as usize;
    if count == 0 {
        return Err(Error::InvalidArgument("checkpoint holds no layers".into()));
    }
    if count.saturating_mul(8) > bytes.len() {
        return Err(Error::Truncated("checkpoint ends inside layer dims".into()));
    }
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rd.u32("layer dims")? as usize;
        let c = rd.u32("layer dims")? as usize;
        dims.push((r, c));
    }
    let read_rbms = |rd: &mut Reader| -> Result<Vec<Rbm>> {
        dims.iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let weights = rd.matrix((r, c))?;
                let hidden_bias = Array1::from(rd.floats(c, "hidden bias")?);
                let visible_bias = Array1::from(rd.floats(r, "visible bias")?);
                Ok(Rbm {
                    weights,
                    visible_bias,
                    hidden_bias,
                    biases_enabled: i < 32 && aux >> i & 1 == 1,
                })
            })
            .collect()
    };
    let read_dense = |rd: &mut Reader, dims: &[(usize, usize)]| -> Result<Vec<Dense>> {
        dims.iter()
            .map(|&(r, c)| {
                let weights = rd.matrix((r, c))?;
                let bias = Array1::from(rd.floats(c, "bias")?);
                Ok(Dense { weights, bias })
            })
            .collect()
    };
    let model = match tag {
        1 => {
            if count != 1 {
                return Err(Error::dims("rbm checkpoint layers", 1, count));
            }
            Model::Rbm(read_rbms(&mut rd)?.remove(0))
        }
        2 => Model::Dbn(DbnStack::new(read_rbms(&mut rd)?)?),
        3 => Model::Mlp(Mlp::from_layers(read_dense(&mut rd, &dims)?, activation_from(aux)?)?),
        4 => {
            let n_enc = aux as usize;
            if n_enc == 0 || n_enc >= count {
                return Err(Error::InvalidArgument(format!(
                    "vae checkpoint splits {count} layers at {n_enc}"
                )));
            }
            let enc = Mlp::from_layers(read_dense(&mut rd, &dims[..n_enc])?, OutputActivation::Identity)?;
            let dec = Mlp::from_layers(read_dense(&mut rd, &dims[n_enc..])?, OutputActivation::Sigmoid)?;
            Model::Vae(VaeModel::from_parts(enc, dec)?)
        }
        other => return Err(Error::InvalidArgument(format!("unknown checkpoint kind tag {other}"))),
    };
    if rd.pos != bytes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - rd.pos
        )));
    }
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)?).map_err(Error::at_path(path))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(Error::at_path(path))?)
}

fn mismatch(expected: &'static str, found: &Model) -> Error {
    Error::KindMismatch {
        expected,
        found: found.kind(),
    }
}

pub fn load_rbm(path: impl AsRef<Path>) -> Result<Rbm> {
    match load(path)? {
        Model::Rbm(r) => Ok(r),
        other => Err(mismatch("rbm", &other)),
    }
}

pub fn load_dbn(path: impl AsRef<Path>) -> Result<DbnStack> {
    match load(path)? {
        Model::Dbn(s) => Ok(s),
        other => Err(mismatch("dbn", &other)),
    }
}

pub fn load_mlp(path: impl AsRef<Path>) -> Result<Mlp> {
    match load(path)? {
        Model::Mlp(m) => Ok(m),
        other => Err(mismatch("mlp", &other)),
    }
}

pub fn load_vae(path: impl AsRef<Path>) -> Result<VaeModel> {
    match load(path)? {
        Model::Vae(v) => Ok(v),
        other => Err(mismatch("vae", &other)),
    }
}

/// Kind recorded in a checkpoint header, if recognized.
pub fn peek_kind(bytes: &[u8]) -> Option<&'static str> {
    if bytes.len() < 8 || bytes[..4] != MAGIC {
        return None;
    }
    kind_name(u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]))
}
