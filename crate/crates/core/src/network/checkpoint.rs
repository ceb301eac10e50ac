//! Checkpoints: the network config as header and one record per named tensor.

use std::path::Path;

use crate::container::{Container, Record, RecordKind, CHECKPOINT_TAG};
use crate::error::{Error, Result};
use crate::network::config::NetworkConfig;
use crate::network::net::Network;
use crate::nn::{Layer, ParamKind};

fn record_kind(kind: ParamKind) -> RecordKind {
    match kind {
        ParamKind::Weight => RecordKind::Weight,
        ParamKind::NoDecay => RecordKind::NoDecay,
        ParamKind::Buffer => RecordKind::Buffer,
    }
}

impl Network {
    /// Every parameter, buffer and mask in visit order.
    pub fn to_container(&mut self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_TAG, self.config())?;
        self.visit("", &mut |p| {
            let mut r = Record::f32(record_kind(p.kind), p.name, p.shape, p.data.clone());
            r.mask = p.mask.map(|m| m.iter().map(|&v| (v != 0.0) as u8).collect());
            c.records.push(r);
        });
        Ok(c)
    }

    /// Rebuilds the network from its config, then fills every tensor by name.
    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_tag(CHECKPOINT_TAG)?;
        let config: NetworkConfig = c.header_as()?;
        let mut net = Network::new(&config, 0)?;
        let records = c.by_name();
        let mut problem: Option<String> = None;
        let mut seen = 0usize;
        net.visit("", &mut |p| {
            if problem.is_some() {
                return;
            }
            let Some(r) = records.get(p.name.as_str()) else {
                problem = Some(format!("missing record `{}`", p.name));
                return;
            };
            let data = match r.as_f32() {
                Ok(d) if d.len() == p.data.len() && r.shape == p.shape => d,
                _ => {
                    problem = Some(format!("record `{}` has shape {:?}, expected {:?}", p.name, r.shape, p.shape));
                    return;
                }
            };
            p.data.copy_from_slice(data);
            match (p.mask, &r.mask) {
                (Some(dst), Some(m)) => {
                    for (d, &b) in dst.iter_mut().zip(m) {
                        *d = if b != 0 { 1.0 } else { 0.0 };
                    }
                }
                (Some(_), None) => problem = Some(format!("record `{}` lacks its mask", p.name)),
                _ => {}
            }
            seen += 1;
        });
        if let Some(msg) = problem {
            return Err(Error::Format(msg));
        }
        if seen != c.records.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} records, network uses {seen}",
                c.records.len()
            )));
        }
        net.sync_masks();
        Ok(net)
    }

    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape4, Tensor4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_bytes_and_outputs() {
        let cfg = NetworkConfig::toy();
        let mut net = Network::new(&cfg, 17).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::randn(Shape4::new(4, 3, 8, 8), 1.0, &mut r);
        net.forward(&x).unwrap();
        net.prune_sfr_stage().unwrap();
        net.prune_lgc_stage().unwrap();
        let bytes = net.to_container().unwrap().to_bytes().unwrap();
        let mut back = Network::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_container().unwrap().to_bytes().unwrap(), bytes);
        assert_eq!(back.live_sfr(), net.live_sfr());
        assert_eq!(back.live_lgc(), net.live_lgc());
        let a = back.layers().next().unwrap().sfr.as_ref().unwrap();
        let b = net.layers().next().unwrap().sfr.as_ref().unwrap();
        assert_eq!(a.stages_done(), 1);
        assert_eq!(a.pruned_rows(0), b.pruned_rows(0));
        net.set_training(false);
        back.set_training(false);
        assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn wrong_tag_or_missing_record_is_rejected() {
        let mut net = Network::new(&NetworkConfig::toy(), 1).unwrap();
        let mut c = net.to_container().unwrap();
        c.records.pop();
        assert!(matches!(Network::from_container(&c), Err(Error::Format(_))));
        c.tag = *b"PLAN";
        assert!(Network::from_container(&c).is_err());
    }
}
