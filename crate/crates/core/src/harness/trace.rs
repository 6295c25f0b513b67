//! Binary attention trace files (`.rkv`).
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RKV1"
//! 4       4     format version (u32, currently 1)
//! 8       28    layers, heads, prompt_len, decode_len, d_model, d_k, d_v (u32 each)
//! 36      ...   f32 tensors, row-major:
//!               for each layer, for each head: W_Q (d_model x d_k),
//!               W_K (d_model x d_k), W_V (d_model x d_v), W_O (d_v x d_model)
//!               prompt embeddings (prompt_len x d_model)
//!               decode embeddings (decode_len x d_model)
//! ```
//!
//! Values are widened to f64 on load and narrowed on save, so a loaded trace
//! saves back byte-identically.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attention::HeadParams;
use crate::error::{Error, Result};
use crate::numerics::RealMatrix;

pub const MAGIC: &[u8; 4] = b"RKV1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceDims {
    pub layers: usize,
    pub heads: usize,
    pub prompt_len: usize,
    pub decode_len: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl TraceDims {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("prompt_len", self.prompt_len),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::domain(format!("trace dimension {name} must be positive")));
        }
        if [self.layers, self.heads, self.prompt_len, self.decode_len, self.d_model, self.d_k, self.d_v]
            .iter()
            .any(|&v| v > u32::MAX as usize)
        {
            return Err(Error::domain("trace dimension exceeds u32"));
        }
        Ok(())
    }

    fn head_floats(&self) -> Option<usize> {
        let qk = self.d_model.checked_mul(self.d_k)?;
        let v = self.d_model.checked_mul(self.d_v)?;
        qk.checked_mul(2)?.checked_add(v.checked_mul(2)?)
    }

    /// Number of f32 values following the header.
    pub fn payload_floats(&self) -> Option<usize> {
        let heads = self.layers.checked_mul(self.heads)?.checked_mul(self.head_floats()?)?;
        let tokens = self
            .prompt_len
            .checked_add(self.decode_len)?
            .checked_mul(self.d_model)?;
        heads.checked_add(tokens)
    }
}

/// Head weights plus the token embeddings shared by every head.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    dims: TraceDims,
    heads: Vec<HeadParams>,
    prompt: RealMatrix,
    decode: RealMatrix,
}

impl Trace {
    /// `heads` is ordered layer-major: index `layer * dims.heads + head`.
    pub fn new(dims: TraceDims, heads: Vec<HeadParams>, prompt: RealMatrix, decode: RealMatrix) -> Result<Self> {
        dims.validate()?;
        if heads.len() != dims.layers * dims.heads {
            return Err(Error::domain(format!(
                "{} heads given for {} layers x {} heads",
                heads.len(),
                dims.layers,
                dims.heads
            )));
        }
        for h in &heads {
            if h.d_model() != dims.d_model
                || h.d_k() != dims.d_k
                || h.d_v() != dims.d_v
                || h.d_out() != dims.d_model
            {
                return Err(Error::domain("head weights do not match trace dims"));
            }
        }
        if prompt.rows() != dims.prompt_len || prompt.cols() != dims.d_model {
            return Err(Error::domain("prompt embeddings do not match trace dims"));
        }
        if decode.rows() != dims.decode_len || decode.cols() != dims.d_model {
            return Err(Error::domain("decode embeddings do not match trace dims"));
        }
        Ok(Self {
            dims,
            heads,
            prompt,
            decode,
        })
    }

    pub fn dims(&self) -> &TraceDims {
        &self.dims
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadParams {
        &self.heads[layer * self.dims.heads + head]
    }

    pub fn prompt(&self) -> &RealMatrix {
        &self.prompt
    }

    pub fn decode(&self) -> &RealMatrix {
        &self.decode
    }
}

pub fn write_trace<W: Write>(trace: &Trace, mut out: W) -> Result<()> {
    let d = &trace.dims;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * d.payload_floats().unwrap_or(0));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [d.layers, d.heads, d.prompt_len, d.decode_len, d.d_model, d.d_k, d.d_v] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut put = |m: &RealMatrix| {
        for &x in m.as_slice() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    for h in &trace.heads {
        put(h.w_q());
        put(h.w_k());
        put(h.w_v());
        put(h.w_o());
    }
    put(&trace.prompt);
    put(&trace.decode);
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::format(self.bytes.len() as u64, "truncated header"))?;
        self.pos += 4;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<RealMatrix> {
        let len = rows * cols;
        let end = self.pos + 4 * len;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.bytes.len() as u64, "truncated tensor payload"))?;
        let mut data = Vec::with_capacity(len);
        for (i, c) in b.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            if !x.is_finite() {
                return Err(Error::format((self.pos + 4 * i) as u64, "non-finite tensor value"));
            }
            data.push(x as f64);
        }
        self.pos = end;
        RealMatrix::new(rows, cols, data)
    }
}

pub fn read_trace<R: Read>(mut input: R) -> Result<Trace> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_trace(&bytes)
}

pub fn parse_trace(bytes: &[u8]) -> Result<Trace> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"RKV1\""));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported format version {version}")));
    }
    let mut fields = [0usize; 7];
    for f in fields.iter_mut() {
        *f = cur.u32()? as usize;
    }
    let [layers, heads, prompt_len, decode_len, d_model, d_k, d_v] = fields;
    let dims = TraceDims {
        layers,
        heads,
        prompt_len,
        decode_len,
        d_model,
        d_k,
        d_v,
    };
    let names = ["layers", "heads", "prompt_len", "decode_len", "d_model", "d_k", "d_v"];
    for (i, (&v, name)) in fields.iter().zip(names).enumerate() {
        if v == 0 && name != "decode_len" {
            return Err(Error::format(8 + 4 * i as u64, format!("dimension {name} is zero")));
        }
    }
    let expected = dims
        .payload_floats()
        .and_then(|f| f.checked_mul(4))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(8, "dimensions overflow"))?;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            expected as u64,
            format!("{} trailing bytes after payload", bytes.len() - expected),
        ));
    }
    let mut params = Vec::with_capacity(layers * heads);
    for _ in 0..layers * heads {
        let w_q = cur.matrix(d_model, d_k)?;
        let w_k = cur.matrix(d_model, d_k)?;
        let w_v = cur.matrix(d_model, d_v)?;
        let w_o = cur.matrix(d_v, d_model)?;
        params.push(HeadParams::new(w_q, w_k, w_v, w_o)?);
    }
    let prompt = cur.matrix(prompt_len, d_model)?;
    let decode = cur.matrix(decode_len, d_model)?;
    Trace::new(dims, params, prompt, decode)
}
