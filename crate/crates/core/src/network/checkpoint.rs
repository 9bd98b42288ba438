//! Generator checkpoints.
//!
//! Layout (little-endian): magic `MNTAW`, `u32` version, the configuration
//! as nine `u32` fields plus one flag byte, a `u32` tensor count, then per
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32` dims and
//! the `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Generator, GeneratorConfig};
use crate::binio::{put_f64s, put_u16, put_u32, to_u32, Reader};
use crate::error::Result;
use crate::rng::Rng;
use crate::ssm::ZohForm;

const MAGIC: &[u8; 5] = b"MNTAW";
const VERSION: u32 = 1;

const FLAG_SHARE: u8 = 1;
const FLAG_SELECTIVE: u8 = 2;
const FLAG_INVERSE_EXP: u8 = 4;

pub fn write_checkpoint(w: &mut impl Write, g: &Generator) -> Result<()> {
    let c = g.config();
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    for (v, what) in [
        (c.n_blocks, "n_blocks"),
        (c.model_dim, "model_dim"),
        (c.state_size, "state_size"),
        (c.expand, "expand"),
        (c.n_classes, "n_classes"),
        (c.feat_dim, "feat_dim"),
        (c.bidirectional_blocks, "bidirectional_blocks"),
        (c.max_timestep, "max_timestep"),
        (super::CONV_WIDTH, "conv width"),
    ] {
        put_u32(w, to_u32(v, what)?)?;
    }
    let mut flags = 0;
    if c.share_branch_weights {
        flags |= FLAG_SHARE;
    }
    if c.selective {
        flags |= FLAG_SELECTIVE;
    }
    if c.zoh == ZohForm::InverseExp {
        flags |= FLAG_INVERSE_EXP;
    }
    w.write_all(&[flags])?;
    put_u32(w, to_u32(g.store().len(), "tensor count")?)?;
    for (name, t) in g.store().iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| crate::Error::InvalidParameter(format!("parameter name too long: {name}")))?;
        put_u16(w, len)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.rank() as u8])?;
        for d in t.shape() {
            put_u32(w, to_u32(*d, "dimension")?)?;
        }
        put_f64s(w, t.data())?;
    }
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<Generator> {
    let mut r = Reader::new(r);
    if &r.bytes(5, "magic")?[..] != MAGIC {
        return Err(crate::Error::Format { offset: 0, msg: "not a generator checkpoint".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let mut f = [0usize; 9];
    for v in f.iter_mut() {
        *v = r.u32("config")? as usize;
    }
    let flags = r.u8("config flags")?;
    if f[8] != super::CONV_WIDTH {
        return r.fail(format!("unsupported convolution width {}", f[8]));
    }
    let config = GeneratorConfig {
        n_blocks: f[0],
        model_dim: f[1],
        state_size: f[2],
        expand: f[3],
        n_classes: f[4],
        feat_dim: f[5],
        bidirectional_blocks: f[6],
        max_timestep: f[7],
        share_branch_weights: flags & FLAG_SHARE != 0,
        selective: flags & FLAG_SELECTIVE != 0,
        zoh: if flags & FLAG_INVERSE_EXP != 0 { ZohForm::InverseExp } else { ZohForm::Exact },
    };
    if let Err(e) = config.validate() {
        return r.fail(format!("invalid configuration: {e}"));
    }
    // structure comes from the config; values are overwritten below
    let mut g = Generator::new(config, &mut Rng::new(0))?;
    let count = r.u32("tensor count")? as usize;
    if count != g.store().len() {
        return r.fail(format!("expected {} tensors, found {count}", g.store().len()));
    }
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.bytes(len, "name")?);
        let Ok(name) = name else {
            return r.fail("parameter name is not UTF-8");
        };
        let Some(id) = g.store().find(&name) else {
            return r.fail(format!("unknown parameter {name}"));
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        if shape != g.store().get(id).shape() {
            return r.fail(format!(
                "parameter {name} has shape {shape:?}, expected {:?}",
                g.store().get(id).shape()
            ));
        }
        let data = r.f64s(g.store().get(id).numel(), "tensor payload")?;
        g.store_mut().get_mut(id).data_mut().copy_from_slice(&data);
    }
    r.expect_end()?;
    Ok(g)
}

pub fn save_checkpoint(path: impl AsRef<Path>, g: &Generator) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, g)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Generator> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
