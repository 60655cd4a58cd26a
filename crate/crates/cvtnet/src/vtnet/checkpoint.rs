//! Text model checkpoints: config echo, flat parameter array and seed
//! provenance.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::vtnet::layers::LayerSpec;
use crate::vtnet::net::{FineLossMode, VtNet, VtNetConfig};

const VERSION: u32 = 1;

fn specs_to_text(specs: &[LayerSpec]) -> String {
    specs
        .iter()
        .map(|s| s.to_text())
        .collect::<Vec<_>>()
        .join(";")
}

fn specs_parse(s: &str) -> Result<Vec<LayerSpec>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(LayerSpec::parse).collect()
}

fn usizes_to_text(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn usizes_parse(s: &str, what: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.parse()
                .map_err(|_| Error::Parse {
                    line: 0,
                    msg: format!("invalid {what} entry `{x}`"),
                })
        })
        .collect()
}

pub fn save(net: &VtNet) -> String {
    let cfg = net.config();
    let mut out = format!("#checkpoint version={VERSION} seed={}\n", cfg.seed);
    let _ = writeln!(out, "input_shape={}", usizes_to_text(&cfg.input_shape));
    let _ = writeln!(out, "base={}", specs_to_text(&cfg.base));
    let _ = writeln!(out, "taps={}", usizes_to_text(&cfg.taps));
    for (i, stack) in cfg.branch_stacks.iter().enumerate() {
        let _ = writeln!(out, "branch{i}={}", specs_to_text(stack));
    }
    let _ = writeln!(out, "head_sizes={}", usizes_to_text(&cfg.head_sizes));
    let _ = writeln!(out, "fine_loss={}", cfg.fine_loss_mode.to_text());
    let _ = writeln!(out, "parent_map={}", usizes_to_text(net.parent_map()));
    let params: Vec<String> = net.flat_params().iter().map(|p| p.to_string()).collect();
    let _ = writeln!(out, "params={}", params.join(" "));
    out
}

pub fn load(text: &str) -> Result<VtNet> {
    let mut seed = None;
    let mut input_shape = None;
    let mut base = None;
    let mut taps = None;
    let mut branch_stacks: Vec<(usize, Vec<LayerSpec>)> = Vec::new();
    let mut head_sizes = None;
    let mut fine_loss_mode = FineLossMode::Literal;
    let mut parent_map = None;
    let mut params: Option<Vec<f64>> = None;

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#checkpoint") {
            for field in rest.split_whitespace() {
                if let Some(v) = field.strip_prefix("seed=") {
                    seed = Some(v.parse::<u64>().map_err(|_| Error::Parse {
                        line: 1,
                        msg: "invalid seed".into(),
                    })?);
                } else if let Some(v) = field.strip_prefix("version=") {
                    let version: u32 = v.parse().map_err(|_| Error::Parse {
                        line: 1,
                        msg: "invalid version".into(),
                    })?;
                    if version != VERSION {
                        return Err(Error::Config(format!(
                            "unsupported checkpoint version {version}"
                        )));
                    }
                }
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("expected key=value, got `{line}`"),
        })?;
        match key {
            "input_shape" => input_shape = Some(usizes_parse(value, "input_shape")?),
            "base" => base = Some(specs_parse(value)?),
            "taps" => taps = Some(usizes_parse(value, "taps")?),
            "head_sizes" => head_sizes = Some(usizes_parse(value, "head_sizes")?),
            "fine_loss" => fine_loss_mode = FineLossMode::parse(value)?,
            "parent_map" => parent_map = Some(usizes_parse(value, "parent_map")?),
            "params" => {
                params = Some(
                    value
                        .split_whitespace()
                        .map(|p| {
                            p.parse().map_err(|_| Error::Parse {
                                line: 0,
                                msg: format!("invalid parameter `{p}`"),
                            })
                        })
                        .collect::<Result<_>>()?,
                )
            }
            other => {
                if let Some(idx) = other.strip_prefix("branch") {
                    let idx: usize = idx.parse().map_err(|_| Error::Parse {
                        line: 0,
                        msg: format!("invalid branch key `{other}`"),
                    })?;
                    branch_stacks.push((idx, specs_parse(value)?));
                } else {
                    return Err(Error::Parse {
                        line: 0,
                        msg: format!("unknown checkpoint key `{other}`"),
                    });
                }
            }
        }
    }

    branch_stacks.sort_by_key(|(i, _)| *i);
    let missing = |what: &str| Error::Parse {
        line: 0,
        msg: format!("checkpoint missing `{what}`"),
    };
    let config = VtNetConfig {
        input_shape: input_shape.ok_or_else(|| missing("input_shape"))?,
        base: base.ok_or_else(|| missing("base"))?,
        taps: taps.ok_or_else(|| missing("taps"))?,
        branch_stacks: branch_stacks.into_iter().map(|(_, s)| s).collect(),
        head_sizes: head_sizes.ok_or_else(|| missing("head_sizes"))?,
        fine_loss_mode,
        seed: seed.ok_or_else(|| missing("seed"))?,
    };
    let mut net = VtNet::build(config, parent_map.ok_or_else(|| missing("parent_map"))?)?;
    net.set_flat_params(&params.ok_or_else(|| missing("params"))?)?;
    Ok(net)
}
