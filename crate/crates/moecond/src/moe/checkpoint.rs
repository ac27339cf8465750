//! Textual checkpoint container.
//!
//! A config header followed by one `tensor <key> <rows> <cols>` block per
//! parameter. Keys follow the `layer{L}.expert{i}.up` / `.down`,
//! `layer{L}.router.gate`, `layer{L}.router.bias`, and
//! `layer{L}.shared{k}.up` / `.down` naming, plus `readout`. Values are
//! written with enough digits to round-trip f64 exactly.

use super::layer::{MoEConfig, MoeLayer};
use super::model::{ModelConfig, MoeModel};
use super::ExpertParams;
use super::RouterParams;
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

const MAGIC: &str = "moecond-checkpoint v1";

pub fn to_string(model: &MoeModel) -> String {
    let cfg = &model.cfg;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "layers {}", cfg.layers);
    let _ = writeln!(out, "n {}", cfg.moe.n);
    let _ = writeln!(out, "k {}", cfg.moe.k);
    let _ = writeln!(out, "r {}", cfg.moe.r);
    let _ = writeln!(out, "n_shared {}", cfg.moe.n_shared);
    let _ = writeln!(out, "d_model {}", cfg.moe.d_model);
    let _ = writeln!(out, "d_hidden {}", cfg.moe.d_hidden);
    let _ = writeln!(out, "d_out {}", cfg.d_out);
    for (l, layer) in model.layers.iter().enumerate() {
        if !layer.condensers.is_empty() {
            let joined: Vec<String> = layer.condensers.iter().map(|j| j.to_string()).collect();
            let _ = writeln!(out, "condensers {l} {}", joined.join(","));
        }
    }
    let mut write_tensor = |key: &str, m: &Matrix| {
        let _ = writeln!(out, "tensor {key} {} {}", m.rows(), m.cols());
        let vals: Vec<String> = m.data().iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(out, "{}", vals.join(" "));
    };
    for (l, layer) in model.layers.iter().enumerate() {
        for (i, e) in layer.experts.iter().enumerate() {
            write_tensor(&format!("layer{l}.expert{i}.up"), &e.up);
            write_tensor(&format!("layer{l}.expert{i}.down"), &e.down);
        }
        for (k, e) in layer.shared.iter().enumerate() {
            write_tensor(&format!("layer{l}.shared{k}.up"), &e.up);
            write_tensor(&format!("layer{l}.shared{k}.down"), &e.down);
        }
        write_tensor(&format!("layer{l}.router.gate"), &layer.router.gate);
        write_tensor(&format!("layer{l}.router.bias"), &Matrix::col(layer.router.bias.clone()));
    }
    write_tensor("readout", &model.readout);
    out
}

pub fn from_string(text: &str) -> Result<MoeModel> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Format("missing checkpoint magic line".into()));
    }
    let mut header: BTreeMap<String, usize> = BTreeMap::new();
    let mut condensers: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut tensors: BTreeMap<String, Matrix> = BTreeMap::new();
    let mut lines = lines.peekable();
    while let Some(line) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let head = parts.next().unwrap_or_default();
        match head {
            "tensor" => {
                let key = parts
                    .next()
                    .ok_or_else(|| Error::Format("tensor line missing key".into()))?
                    .to_string();
                let rows: usize = parse_field(parts.next(), "tensor rows")?;
                let cols: usize = parse_field(parts.next(), "tensor cols")?;
                let data_line = lines
                    .next()
                    .ok_or_else(|| Error::Format(format!("tensor {key} missing data line")))?;
                let data: Vec<f64> = data_line
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|e| Error::Format(format!("bad value in {key}: {e}")))
                    })
                    .collect::<Result<_>>()?;
                let m = Matrix::from_vec(rows, cols, data)
                    .map_err(|e| Error::Format(format!("tensor {key}: {e}")))?;
                if tensors.insert(key.clone(), m).is_some() {
                    return Err(Error::Format(format!("duplicate tensor {key}")));
                }
            }
            "condensers" => {
                let l: usize = parse_field(parts.next(), "condensers layer")?;
                let list = parts
                    .next()
                    .ok_or_else(|| Error::Format("condensers line missing index list".into()))?;
                let idx: Vec<usize> = list
                    .split(',')
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|e| Error::Format(format!("bad condenser index: {e}")))
                    })
                    .collect::<Result<_>>()?;
                condensers.insert(l, idx);
            }
            key => {
                let v: usize = parse_field(parts.next(), key)?;
                header.insert(key.to_string(), v);
            }
        }
    }
    let field = |k: &str| -> Result<usize> {
        header
            .get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("header missing '{k}'")))
    };
    let cfg = ModelConfig {
        moe: MoEConfig {
            n: field("n")?,
            k: field("k")?,
            r: field("r")?,
            n_shared: field("n_shared")?,
            d_model: field("d_model")?,
            d_hidden: field("d_hidden")?,
        },
        layers: field("layers")?,
        d_out: field("d_out")?,
    };
    cfg.validate()?;
    let mut take = |key: String| -> Result<Matrix> {
        tensors
            .remove(&key)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {key}")))
    };
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut experts = Vec::with_capacity(cfg.moe.n);
        for i in 0..cfg.moe.n {
            experts.push(ExpertParams {
                up: take(format!("layer{l}.expert{i}.up"))?,
                down: take(format!("layer{l}.expert{i}.down"))?,
            });
        }
        let mut shared = Vec::with_capacity(cfg.moe.n_shared);
        for k in 0..cfg.moe.n_shared {
            shared.push(ExpertParams {
                up: take(format!("layer{l}.shared{k}.up"))?,
                down: take(format!("layer{l}.shared{k}.down"))?,
            });
        }
        let gate = take(format!("layer{l}.router.gate"))?;
        let bias_m = take(format!("layer{l}.router.bias"))?;
        layers.push(MoeLayer {
            experts,
            shared,
            router: RouterParams {
                gate,
                bias: bias_m.data().to_vec(),
            },
            condensers: condensers.remove(&l).unwrap_or_default(),
        });
    }
    let readout = take("readout".to_string())?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    Ok(MoeModel {
        cfg,
        layers,
        readout,
    })
}

fn parse_field(tok: Option<&str>, what: &str) -> Result<usize> {
    tok.ok_or_else(|| Error::Format(format!("missing value for {what}")))?
        .parse::<usize>()
        .map_err(|e| Error::Format(format!("bad value for {what}: {e}")))
}

pub fn save(model: &MoeModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MoeModel> {
    let text = std::fs::read_to_string(path)?;
    from_string(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig {
            moe: MoEConfig {
                n: 3,
                k: 2,
                r: 1,
                n_shared: 1,
                d_model: 5,
                d_hidden: 4,
            },
            layers: 2,
            d_out: 3,
        };
        let mut rng = seed::rng(99, "init", 0);
        let mut model = MoeModel::init(cfg, &mut rng).unwrap();
        model.layers[0].condensers = vec![2];
        model.layers[1].condensers = vec![0];
        model.layers[1].router.bias = vec![0.125, -3.5e-7, 1.0];
        let text = to_string(&model);
        let back = from_string(&text).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn normative_keys_present() {
        let cfg = ModelConfig {
            moe: MoEConfig {
                n: 2,
                k: 1,
                r: 0,
                n_shared: 1,
                d_model: 3,
                d_hidden: 2,
            },
            layers: 1,
            d_out: 2,
        };
        let mut rng = seed::rng(5, "init", 0);
        let model = MoeModel::init(cfg, &mut rng).unwrap();
        let text = to_string(&model);
        for key in [
            "tensor layer0.expert0.up ",
            "tensor layer0.expert1.down ",
            "tensor layer0.router.gate ",
            "tensor layer0.router.bias ",
            "tensor layer0.shared0.up ",
            "tensor readout ",
        ] {
            assert!(text.contains(key), "missing {key}");
        }
    }

    #[test]
    fn malformed_checkpoints_are_rejected() {
        assert!(from_string("not a checkpoint").is_err());
        let cfg = ModelConfig {
            moe: MoEConfig {
                n: 1,
                k: 1,
                r: 0,
                n_shared: 0,
                d_model: 2,
                d_hidden: 2,
            },
            layers: 1,
            d_out: 1,
        };
        let mut rng = seed::rng(6, "init", 0);
        let model = MoeModel::init(cfg, &mut rng).unwrap();
        let text = to_string(&model);
        let truncated: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(from_string(&truncated).is_err());
    }
}
