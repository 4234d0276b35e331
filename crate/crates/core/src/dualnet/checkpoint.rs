//! Plain-text checkpoint format.
//!
//! ```text
//! pascl-checkpoint 1
//! scalar f64
//! config input_dim=2 width=64 depth=3 proj_dim=16 classes=10 bn_eps=<bits> bn_momentum=<bits>
//! flags aux_initialized=1 stage1_complete=1
//! tensor block0.weight 2x64 <bits> <bits> ...
//! ...
//! end
//! ```
//!
//! Every real number is the 16-digit hex bit pattern of its `f64` value, which
//! makes a write/read round trip bit-exact for both `f32` and `f64` networks.
//! Tensors are the learnable parameters named by [`super::ParamId`] followed by
//! `block{i}.bn_{main|aux}.running_mean` and `.running_var`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::{Branch, DualBranchNetwork, NetConfig};
use crate::error::{PasclError, Result};
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: &str = "pascl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unbits(s: &str) -> Result<f64> {
    if s.len() != 16 {
        return Err(data(format!("bad number {s:?}")));
    }
    u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|_| data(format!("bad number {s:?}")))
}

fn data(msg: impl Into<String>) -> PasclError {
    PasclError::Data(format!("checkpoint: {}", msg.into()))
}

fn running_names(i: usize, b: Branch) -> [String; 2] {
    [format!("block{i}.bn_{b}.running_mean"), format!("block{i}.bn_{b}.running_var")]
}

pub fn write_checkpoint<S: Real, W: Write>(net: &DualBranchNetwork<S>, mut w: W) -> Result<()> {
    let c = &net.config;
    writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    writeln!(w, "scalar {}", S::NAME)?;
    writeln!(
        w,
        "config input_dim={} width={} depth={} proj_dim={} classes={} bn_eps={} bn_momentum={}",
        c.input_dim,
        c.width,
        c.depth,
        c.proj_dim,
        c.classes,
        bits(c.bn_eps),
        bits(c.bn_momentum)
    )?;
    writeln!(
        w,
        "flags aux_initialized={} stage1_complete={}",
        u8::from(net.aux_initialized),
        u8::from(net.stage1_complete)
    )?;
    let mut tensor = |name: &str, dims: &[usize], values: &[S]| -> Result<()> {
        let shape: Vec<String> = dims.iter().map(usize::to_string).collect();
        write!(w, "tensor {name} {}", shape.join("x"))?;
        for v in values {
            write!(w, " {}", bits(v.as_f64()))?;
        }
        writeln!(w)?;
        Ok(())
    };
    for id in net.all_parameters() {
        tensor(&id.to_string(), &net.param_dims(id), net.param(id))?;
    }
    for (i, block) in net.blocks.iter().enumerate() {
        for b in [Branch::Main, Branch::Aux] {
            let bn = block.bn(b);
            let [mean, var] = running_names(i, b);
            tensor(&mean, &[bn.features()], &bn.running_mean)?;
            tensor(&var, &[bn.features()], &bn.running_var)?;
        }
    }
    writeln!(w, "end")?;
    Ok(())
}

fn fields<'a>(line: &'a str, tag: &str) -> Result<BTreeMap<&'a str, &'a str>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(tag) {
        return Err(data(format!("expected a {tag} line, got {line:?}")));
    }
    parts
        .map(|kv| kv.split_once('=').ok_or_else(|| data(format!("bad field {kv:?}"))))
        .collect()
}

fn field<'a>(map: &BTreeMap<&'a str, &'a str>, key: &str) -> Result<&'a str> {
    map.get(key).copied().ok_or_else(|| data(format!("missing field {key}")))
}

fn usize_field(map: &BTreeMap<&str, &str>, key: &str) -> Result<usize> {
    field(map, key)?.parse().map_err(|_| data(format!("bad {key}")))
}

fn flag_field(map: &BTreeMap<&str, &str>, key: &str) -> Result<bool> {
    match field(map, key)? {
        "0" => Ok(false),
        "1" => Ok(true),
        v => Err(data(format!("bad {key} {v:?}"))),
    }
}

/// Reads a checkpoint written by [`write_checkpoint`] for the same scalar type.
pub fn read_checkpoint<S: Real, R: BufRead>(r: R) -> Result<DualBranchNetwork<S>> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> { lines.next().ok_or_else(|| data("truncated file"))?.map_err(Into::into) };

    let header = next()?;
    let version = header
        .strip_prefix(CHECKPOINT_MAGIC)
        .map(str::trim)
        .ok_or_else(|| data("not a checkpoint file"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(data(format!("version {version} is not supported (expected {CHECKPOINT_VERSION})")));
    }
    let scalar = next()?;
    if scalar.trim() != format!("scalar {}", S::NAME) {
        return Err(data(format!("scalar type mismatch: file has {scalar:?}, reader wants {}", S::NAME)));
    }
    let cfg_line = next()?;
    let cfg = fields(&cfg_line, "config")?;
    let config = NetConfig {
        input_dim: usize_field(&cfg, "input_dim")?,
        width: usize_field(&cfg, "width")?,
        depth: usize_field(&cfg, "depth")?,
        proj_dim: usize_field(&cfg, "proj_dim")?,
        classes: usize_field(&cfg, "classes")?,
        bn_eps: unbits(field(&cfg, "bn_eps")?)?,
        bn_momentum: unbits(field(&cfg, "bn_momentum")?)?,
    };
    config.validate().map_err(|e| data(e.to_string()))?;
    let flags_line = next()?;
    let flags = fields(&flags_line, "flags")?;
    let mut net = DualBranchNetwork::<S>::new(config, 0)?;
    net.aux_initialized = flag_field(&flags, "aux_initialized")?;
    net.stage1_complete = flag_field(&flags, "stage1_complete")?;

    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<S>)> = BTreeMap::new();
    loop {
        let line = next()?;
        if line.trim() == "end" {
            break;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(data(format!("unexpected line {line:?}")));
        }
        let name = parts.next().ok_or_else(|| data("tensor without a name"))?.to_string();
        let dims = parts
            .next()
            .ok_or_else(|| data(format!("{name}: missing shape")))?
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| data(format!("{name}: bad shape"))))
            .collect::<Result<Vec<_>>>()?;
        let values = parts.map(|s| unbits(s).map(S::lit)).collect::<Result<Vec<S>>>()?;
        if tensors.insert(name.clone(), (dims, values)).is_some() {
            return Err(data(format!("{name} appears twice")));
        }
    }

    let mut take = |name: &str, dims: &[usize]| -> Result<Vec<S>> {
        let (d, v) = tensors.remove(name).ok_or_else(|| data(format!("{name} missing")))?;
        if d != dims || v.len() != dims.iter().product::<usize>() {
            return Err(data(format!("{name}: shape {d:?} with {} values, expected {dims:?}", v.len())));
        }
        Ok(v)
    };
    for id in net.all_parameters() {
        let values = take(&id.to_string(), &net.param_dims(id))?;
        net.param_mut(id).copy_from_slice(&values);
    }
    for i in 0..net.blocks.len() {
        for b in [Branch::Main, Branch::Aux] {
            let f = net.blocks[i].bn(b).features();
            let [mean, var] = running_names(i, b);
            let mean = take(&mean, &[f])?;
            let var = take(&var, &[f])?;
            let bn = net.blocks[i].bn_mut(b);
            bn.running_mean = mean;
            bn.running_var = var;
            bn.validate().map_err(|e| data(e.to_string()))?;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(data(format!("unknown tensor {extra}")));
    }
    Ok(net)
}
