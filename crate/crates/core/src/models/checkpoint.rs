//! Text checkpoints.
//!
//! ```text
//! frameflow-checkpoint 1
//! n 3
//! m 2
//! net f_net widths=3,32,32,32,32,6 activation=lipswish head=spherical:0.01:3 init=glorot-normal
//! net t_net widths=3,32,32,32,32,2 activation=lipswish head=softplus:1e-8 init=glorot-normal
//! net s_net widths=4,32,32,32,32,3 activation=lipswish head=identity init=glorot-normal
//! tensor f_net.0.weight 32 3
//! <one line per row, space separated>
//! ...
//! tensor c 1 3
//! -0.12 0.4 0.031
//! end
//! ```
//!
//! An optional `net sigma_net ...` line enables the conformal-factor network.
//! Values are written in shortest round-trip decimal form, so loading
//! reproduces every parameter bit for bit.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::frame::{FrameArchitecture, FrameModel};
use super::mlp::{Activation, Head, Init, MlpSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "frameflow-checkpoint 1";

fn head_to_string(head: Head) -> String {
    match head {
        Head::Identity => "identity".into(),
        Head::Softplus { floor } => format!("softplus:{floor}"),
        Head::SphericalProjection { radius, block } => format!("spherical:{radius}:{block}"),
    }
}

fn parse_head(s: &str) -> Option<Head> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["identity"] => Some(Head::Identity),
        ["softplus", f] => Some(Head::Softplus {
            floor: f.parse().ok()?,
        }),
        ["spherical", r, b] => Some(Head::SphericalProjection {
            radius: r.parse().ok()?,
            block: b.parse().ok()?,
        }),
        _ => None,
    }
}

fn spec_line(name: &str, spec: &MlpSpec) -> String {
    let widths: Vec<String> = spec.widths.iter().map(usize::to_string).collect();
    format!(
        "net {name} widths={} activation={} head={} init={}",
        widths.join(","),
        spec.activation.name(),
        head_to_string(spec.head),
        spec.init.name()
    )
}

/// Serializes `model` to the text format above.
pub fn to_string(model: &FrameModel) -> String {
    let mut out = String::new();
    let arch = model.architecture();
    let _ = writeln!(out, "{MAGIC}\nn {}\nm {}", model.n, model.m);
    let _ = writeln!(out, "{}", spec_line("f_net", &arch.f_net));
    let _ = writeln!(out, "{}", spec_line("t_net", &arch.t_net));
    if let Some(s) = &arch.sigma_net {
        let _ = writeln!(out, "{}", spec_line("sigma_net", s));
    }
    let _ = writeln!(out, "{}", spec_line("s_net", &arch.s_net));
    for (name, t) in model.param_names().iter().zip(model.params()) {
        let _ = writeln!(out, "tensor {name} {} {}", t.rows(), t.cols());
        for r in 0..t.rows() {
            let row: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    out.push_str("end\n");
    out
}

pub fn save(model: &FrameModel, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_string(model))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FrameModel> {
    let text = std::fs::read_to_string(path)?;
    from_str(&text).map_err(|message| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}

/// Parses the text format; errors carry a line-level message.
pub fn from_str(text: &str) -> Result<FrameModel, String> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        _ => return Err(format!("missing header `{MAGIC}`")),
    }
    let mut dims: HashMap<&str, usize> = HashMap::new();
    let mut nets: HashMap<String, MlpSpec> = HashMap::new();
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    let mut finished = false;
    while let Some((no, line)) = lines.next() {
        let mut words = line.split_whitespace();
        match words.next() {
            Some(key @ ("n" | "m")) => {
                let v = words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or(format!("line {no}: bad `{key}`"))?;
                dims.insert(key, v);
            }
            Some("net") => {
                let name = words
                    .next()
                    .ok_or(format!("line {no}: net without name"))?
                    .to_string();
                let spec = parse_spec(words).map_err(|e| format!("line {no}: {e}"))?;
                nets.insert(name, spec);
            }
            Some("tensor") => {
                let name = words
                    .next()
                    .ok_or(format!("line {no}: tensor without name"))?
                    .to_string();
                let mut dim = || words.next().and_then(|w| w.parse::<usize>().ok());
                let (rows, cols) = match (dim(), dim()) {
                    (Some(r), Some(c)) => (r, c),
                    _ => return Err(format!("line {no}: tensor `{name}` needs rows and cols")),
                };
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (rno, row) = lines.next().ok_or(format!("tensor `{name}` truncated"))?;
                    for w in row.split_whitespace() {
                        data.push(
                            w.parse::<f64>()
                                .map_err(|_| format!("line {rno}: bad value `{w}`"))?,
                        );
                    }
                }
                let t = Tensor::from_vec(rows, cols, data)
                    .map_err(|e| format!("tensor `{name}`: {e}"))?;
                tensors.insert(name, t);
            }
            Some("end") => {
                finished = true;
                break;
            }
            Some(other) => return Err(format!("line {no}: unknown record `{other}`")),
            None => {}
        }
    }
    if !finished {
        return Err("missing `end`".into());
    }
    let n = *dims.get("n").ok_or("missing `n`")?;
    let m = *dims.get("m").ok_or("missing `m`")?;
    let mut take_net = |name: &str| nets.remove(name).ok_or(format!("missing net `{name}`"));
    let arch = FrameArchitecture {
        f_net: take_net("f_net")?,
        t_net: take_net("t_net")?,
        sigma_net: take_net("sigma_net").ok(),
        s_net: take_net("s_net")?,
    };
    let mut model = super::frame::init_frame_model(arch, n, m, 0).map_err(|e| e.to_string())?;
    let names = model.param_names();
    for (name, slot) in names.iter().zip(model.params_mut()) {
        let t = tensors
            .remove(name)
            .ok_or(format!("missing tensor `{name}`"))?;
        if t.shape() != slot.shape() {
            return Err(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            ));
        }
        *slot = t;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(format!("unexpected tensor `{extra}`"));
    }
    Ok(model)
}

fn parse_spec<'a>(words: impl Iterator<Item = &'a str>) -> Result<MlpSpec, String> {
    let mut widths = None;
    let mut activation = None;
    let mut head = None;
    let mut init = None;
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or(format!("expected key=value, got `{w}`"))?;
        match k {
            "widths" => {
                widths = Some(
                    v.split(',')
                        .map(str::parse)
                        .collect::<Result<Vec<usize>, _>>()
                        .map_err(|_| "bad widths")?,
                )
            }
            "activation" => {
                activation = Some(Activation::parse(v).ok_or(format!("unknown activation `{v}`"))?)
            }
            "head" => head = Some(parse_head(v).ok_or(format!("unknown head `{v}`"))?),
            "init" => init = Some(Init::parse(v).ok_or(format!("unknown init `{v}`"))?),
            _ => return Err(format!("unknown net attribute `{k}`")),
        }
    }
    Ok(MlpSpec {
        widths: widths.ok_or("missing widths")?,
        activation: activation.ok_or("missing activation")?,
        head: head.ok_or("missing head")?,
        init: init.ok_or("missing init")?,
    })
}
