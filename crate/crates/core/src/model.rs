//! The cascade model: one shared projection and a template bank per stage.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::head::TemplateBank;
use crate::psmap::{ARConfig, ProjectionWeights};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub cfg: ARConfig,
    pub proj: ProjectionWeights<f32>,
    pub stages: Vec<TemplateBank<f32>>,
}

pub fn stage_prefix(k: usize) -> String {
    format!("stage{k}.")
}

impl CascadeModel {
    /// He-initialized projection and stage banks drawn from `seed`.
    pub fn init(cfg: &ARConfig, input_dim: usize, stages: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if stages == 0 {
            return Err(Error::Config("a cascade needs at least one stage".into()));
        }
        let proj = ProjectionWeights::init(cfg, input_dim, &mut stream(seed, "init-projection", 0));
        let stages = (0..stages)
            .map(|k| TemplateBank::init(cfg, &mut stream(seed, "init-templates", k as u64)))
            .collect();
        Ok(CascadeModel {
            cfg: cfg.clone(),
            proj,
            stages,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.proj.input_dim
    }

    /// The first `n` stages.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.stages.len() {
            return Err(Error::Config(format!(
                "cannot keep {n} of {} stages",
                self.stages.len()
            )));
        }
        Ok(CascadeModel {
            cfg: self.cfg.clone(),
            proj: self.proj.clone(),
            stages: self.stages[..n].to_vec(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        ck.push_params("", &self.proj)?;
        for (k, bank) in self.stages.iter().enumerate() {
            ck.push_params(&stage_prefix(k), bank)?;
        }
        Ok(ck)
    }

    /// Rebuilds a model for `cfg`; the input width and stage count come from the tensors.
    pub fn from_checkpoint(cfg: &ARConfig, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let first = ck
            .require("proj.comp0.roi.weight")
            .or_else(|_| ck.require("proj.comp0.shared.weight"))?;
        let input_dim = *first
            .shape
            .get(1)
            .ok_or_else(|| Error::shape("2-d projection weight", format!("{:?}", first.shape)))?;
        let mut proj = ProjectionWeights::zeros(cfg, input_dim);
        ck.fill_params("", &mut proj)?;
        let mut stages = Vec::new();
        while ck.get(&format!("{}comp0.cls", stage_prefix(stages.len()))).is_some() {
            let mut bank = TemplateBank::zeros(cfg);
            ck.fill_params(&stage_prefix(stages.len()), &mut bank)?;
            stages.push(bank);
        }
        if stages.is_empty() {
            return Err(Error::Config("checkpoint holds no template bank".into()));
        }
        Ok(CascadeModel {
            cfg: cfg.clone(),
            proj,
            stages,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psmap::Tiling;

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ARConfig::default();
        let m = CascadeModel::init(&cfg, 19, 2, 7).unwrap();
        let ck = m.to_checkpoint().unwrap();
        let back = CascadeModel::from_checkpoint(&cfg, &ck).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint().unwrap().to_bytes(), ck.to_bytes());
    }

    #[test]
    fn shared_role_maps_round_trip() {
        let cfg = ARConfig {
            share_role_maps: true,
            tilings: vec![Tiling::new(2, 3)],
            ..ARConfig::default()
        };
        let m = CascadeModel::init(&cfg, 5, 1, 1).unwrap();
        let back = CascadeModel::from_checkpoint(&cfg, &m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let m = CascadeModel::init(&ARConfig::default(), 19, 1, 7).unwrap();
        let other = ARConfig {
            k: 2,
            ..ARConfig::default()
        };
        assert!(CascadeModel::from_checkpoint(&other, &m.to_checkpoint().unwrap()).is_err());
    }

    #[test]
    fn init_is_seeded_and_truncation_keeps_prefix() {
        let cfg = ARConfig::default();
        let a = CascadeModel::init(&cfg, 19, 2, 7).unwrap();
        assert_eq!(a, CascadeModel::init(&cfg, 19, 2, 7).unwrap());
        assert_ne!(a.stages[0], a.stages[1]);
        let t = a.truncated(1).unwrap();
        assert_eq!(t.stages, vec![a.stages[0].clone()]);
        assert!(a.truncated(3).is_err());
    }
}
