//! Versioned JSON checkpoints.
//!
//! ```json
//! {"version":1, "config":{…}, "cond_dim":1,
//!  "blocks":[{"actnorm":{"s":[…],"b":[…]}, "gamma":1.99,
//!             "pnn":{"p":2, "layers":[{"T_tilde":[[…]], "b":[…], "act":"elu"}]}}]}
//! ```
//!
//! `cond_dim` is present only for conditional flows. Floats are written in
//! the shortest form that parses back to the same bits.

use crate::error::{Error, Result};
use crate::flow::{ActNorm, ProxFlow, ResidualBlock};
use crate::linalg::Mat;
use crate::pnn::{PolarSettings, Pnn, ProxBlock, StableActivation, StiefelParam};
use crate::train::{Model, TrainConfig};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Doc {
    version: u32,
    config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "is_zero")]
    cond_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    blocks: Vec<BlockDoc>,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

#[derive(Serialize, Deserialize)]
struct BlockDoc {
    actnorm: ActNormDoc,
    gamma: f64,
    pnn: PnnDoc,
}

#[derive(Serialize, Deserialize)]
struct ActNormDoc {
    s: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PnnDoc {
    p: usize,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    #[serde(rename = "T_tilde")]
    t_tilde: Vec<Vec<f64>>,
    b: Vec<f64>,
    act: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        let flow = &self.flow;
        let blocks = flow
            .blocks
            .iter()
            .map(|b| {
                if !b.actnorm.is_initialized() {
                    return Err(Error::ActNormUninitialized);
                }
                Ok(BlockDoc {
                    actnorm: ActNormDoc {
                        s: b.actnorm.scale().as_slice().to_vec(),
                        b: b.actnorm.shift().as_slice().to_vec(),
                    },
                    gamma: b.gamma(),
                    pnn: PnnDoc {
                        p: b.phi.widen_p(),
                        layers: b
                            .phi
                            .blocks
                            .iter()
                            .map(|l| LayerDoc {
                                t_tilde: rows_of(l.t.raw()),
                                b: l.bias.as_slice().to_vec(),
                                act: l.act.name().into(),
                                alpha: match l.act {
                                    StableActivation::Elu { alpha } if alpha != 1.0 => Some(alpha),
                                    _ => None,
                                },
                            })
                            .collect(),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let doc = Doc {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            cond_dim: flow.cond_dim(),
            dim: Some(flow.dim()),
            blocks,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Doc = serde_json::from_str(text)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", doc.version)));
        }
        let polar = doc.config.as_ref().map_or_else(PolarSettings::default, TrainConfig::polar);
        let dim = doc
            .dim
            .or_else(|| doc.blocks.first().map(|b| b.actnorm.s.len()))
            .or_else(|| doc.config.as_ref().map(|c| c.n))
            .ok_or_else(|| Error::invalid("checkpoint has no blocks and no dimension"))?;
        let cond_dim = doc.cond_dim;
        let blocks = doc
            .blocks
            .into_iter()
            .map(|b| {
                let layers = b
                    .pnn
                    .layers
                    .into_iter()
                    .map(|l| {
                        let raw = Mat::from_rows(&l.t_tilde)?;
                        let act = StableActivation::from_name(&l.act, l.alpha)?;
                        let h = l.b.len();
                        ProxBlock::new(StiefelParam::new(raw, polar)?, Mat::from_vec(h, 1, l.b)?, act)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let phi = Pnn::new(layers, b.pnn.p, dim + cond_dim)?;
                let an = ActNorm::new(b.actnorm.s, b.actnorm.b)?;
                ResidualBlock::with_condition(b.gamma, phi, an, cond_dim)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            config: doc.config,
            flow: ProxFlow::assemble(dim, cond_dim, blocks)?,
        })
    }

    /// Write via a temporary sibling file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Replace `path` with `bytes` so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Architecture;
    use crate::linalg::Rng;

    fn model(cond_dim: usize) -> Model {
        let mut rng = Rng::new(1);
        let arch = Architecture {
            dim: 2,
            cond_dim,
            blocks: 2,
            widen_p: 3,
            hidden: 5,
            kappa: 3,
            gamma: 1.99,
            activation: StableActivation::default(),
        };
        let mut flow = ProxFlow::random(&arch, true, &mut rng).unwrap();
        let mut p = flow.params_flat();
        for (v, m) in p.iter_mut().zip(flow.trainable_mask()) {
            if m {
                *v += 0.1 * rng.normal();
            }
        }
        flow.set_params_flat(&p, PolarSettings::default()).unwrap();
        Model { config: None, flow }
    }

    #[test]
    fn round_trip_preserves_densities() {
        let m = model(0);
        let text = m.to_json().unwrap();
        assert!(text.contains("\"T_tilde\""));
        assert!(!text.contains("cond_dim"));
        let back = Model::from_json(&text).unwrap();
        assert_eq!(back, m);
        let x = Rng::new(2).normal_mat(2, 100);
        let a = m.flow.log_density(&x).unwrap().1;
        let b = back.flow.log_density(&x).unwrap().1;
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-15);
        }
    }

    #[test]
    fn conditional_round_trip() {
        let m = model(1);
        let text = m.to_json().unwrap();
        assert!(text.contains("\"cond_dim\":1"));
        let back = Model::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert!(back.conditional().is_ok());
    }

    #[test]
    fn rejects_bad_documents() {
        let text = model(0).to_json().unwrap();
        assert!(Model::from_json(&text.replace("\"version\":1", "\"version\":2")).is_err());
        let bad_gamma = text.replace("\"gamma\":1.99", "\"gamma\":2.5");
        assert!(Model::from_json(&bad_gamma).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = std::env::temp_dir().join(format!("proxflow-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("m.json");
        let m = model(0);
        m.save(&p).unwrap();
        m.save(&p).unwrap();
        assert_eq!(Model::load(&p).unwrap(), m);
        assert_eq!(std::fs::read_dir(&dir).unwrap().count(), 1);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
