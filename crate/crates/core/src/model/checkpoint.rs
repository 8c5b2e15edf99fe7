//! AVCP: little-endian parameter file.
//!
//! ```text
//! "AVCP" u32 version u32 d u32 num_classes
//! f64[d*d] W_a, f64[d*d] W_v, f64[d*d] U_a, f64[d*d] U_v,
//! f64[num_classes*d] cls_weight, f64[num_classes] cls_bias
//! ```

use std::fs;
use std::path::Path;

use super::ModelParams;
use crate::binio::{u32_field, write_atomic, Reader};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVCP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    params.check()?;
    let total: usize = params.buffer_lens().iter().sum();
    let mut out = Vec::with_capacity(16 + 8 * total);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        CHECKPOINT_VERSION,
        u32_field(params.d, "d")?,
        u32_field(params.num_classes, "num_classes")?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in params.buffers() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail(format!("bad magic {magic:?}, expected \"AVCP\"")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let d = r.u32("d")? as usize;
    let c = r.u32("num_classes")? as usize;
    let mut square = |name: &str| -> Result<Tensor> { Tensor::new(vec![d, d], r.f64s(d * d, name)?) };
    let w_a = square("W_a")?;
    let w_v = square("W_v")?;
    let u_a = square("U_a")?;
    let u_v = square("U_v")?;
    let cls_weight = Tensor::new(vec![c, d], r.f64s(c * d, "classifier weight")?)?;
    let cls_bias = Tensor::new(vec![c], r.f64s(c, "classifier bias")?)?;
    r.finish()?;
    let params = ModelParams {
        d,
        num_classes: c,
        w_a,
        w_v,
        u_a,
        u_v,
        cls_weight,
        cls_bias,
    };
    if !params.buffers().iter().all(|t| t.all_finite()) {
        return Err(Error::Format {
            offset: 16,
            message: "checkpoint holds non-finite parameters".into(),
        });
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&fs::read(path)?)
}
