use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::world::{class_names, generate_sample, DomainSpec, PatternWorld};
use crate::encoders::TextEncoder;
use crate::error::{contract, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Base-to-new: train on half the classes, test on the disjoint rest.
    B2n,
    /// Cross-dataset: targets differ in style and in class list.
    Cd,
    /// Single-source multi-target: shared label set, shifted styles.
    Ssmt,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::B2n => "b2n",
            Protocol::Cd => "cd",
            Protocol::Ssmt => "ssmt",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b2n" => Ok(Protocol::B2n),
            "cd" => Ok(Protocol::Cd),
            "ssmt" => Ok(Protocol::Ssmt),
            other => contract(format!("unknown protocol {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_classes: usize,
    pub n_domains: usize,
    /// Domain shift magnitude.
    pub shift: f64,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Samples generated per (domain, class); eval and train draw from it.
    pub pool_per_class: usize,
    pub eval_per_class: usize,
    /// Fraction of each cross-dataset target class list taken from the source classes.
    pub cd_overlap: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_classes: 16,
            n_domains: 4,
            shift: 0.0,
            noise: 0.1,
            pool_per_class: 64,
            eval_per_class: 16,
            cd_overlap: 0.5,
        }
    }
}

/// One evaluation target: which domain, which candidate classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub name: String,
    pub domain: usize,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub protocol: Protocol,
    pub seed: u64,
    pub shots: usize,
    pub class_names: Vec<String>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub source_domain: usize,
    pub target_domains: Vec<usize>,
    pub evals: Vec<EvalSpec>,
    pub domains: Vec<DomainSpec>,
}

impl ProtocolSplit {
    pub fn seen_set(&self) -> BTreeSet<usize> {
        self.seen.iter().copied().collect()
    }

    pub fn unseen_set(&self) -> BTreeSet<usize> {
        self.unseen.iter().copied().collect()
    }
}

/// Images of one domain with global class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    pub domain: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `B x W x H x C` tensor of the images.
    pub fn stacked(&self) -> Result<Tensor> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::Degenerate("empty batch".into()))?;
        let mut shape = vec![self.images.len()];
        shape.extend_from_slice(first.shape());
        let data = self.images.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(&shape, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub spec: EvalSpec,
    pub data: DomainBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: DomainBatch,
    pub evals: Vec<EvalSet>,
}

fn half_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "class-split"));
    let k = n.div_ceil(2);
    let mut seen = idx[..k].to_vec();
    let mut unseen = idx[k..].to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();
    (seen, unseen)
}

/// Constructs only the class/domain bookkeeping of a protocol.
pub fn plan_split(
    protocol: Protocol,
    cfg: &DataConfig,
    shots: usize,
    seed: u64,
    channels: usize,
) -> Result<ProtocolSplit> {
    if cfg.n_classes < 2 {
        return contract("need at least two classes");
    }
    if shots == 0 {
        return contract("shots must be at least 1");
    }
    if cfg.eval_per_class == 0 {
        return contract("eval_per_class must be at least 1");
    }
    if shots + cfg.eval_per_class > cfg.pool_per_class {
        return contract(format!(
            "{shots} shots + {} eval samples exceed the pool of {} per class",
            cfg.eval_per_class, cfg.pool_per_class
        ));
    }
    if cfg.n_domains == 0 || (protocol != Protocol::B2n && cfg.n_domains < 2) {
        return contract("protocol needs a source and at least one target domain");
    }
    let names = class_names(cfg.n_classes)?;
    let all: Vec<usize> = (0..cfg.n_classes).collect();
    let targets: Vec<usize> = (1..cfg.n_domains).collect();
    let (seen, unseen, evals) = match protocol {
        Protocol::B2n => {
            let (seen, unseen) = half_split(cfg.n_classes, seed);
            let evals = vec![
                EvalSpec { name: "base".into(), domain: 0, classes: seen.clone() },
                EvalSpec { name: "new".into(), domain: 0, classes: unseen.clone() },
            ];
            (seen, unseen, evals)
        }
        Protocol::Ssmt => {
            let mut evals = vec![EvalSpec { name: "source".into(), domain: 0, classes: all.clone() }];
            for &d in &targets {
                evals.push(EvalSpec { name: format!("target{d}"), domain: d, classes: all.clone() });
            }
            (all.clone(), all.clone(), evals)
        }
        Protocol::Cd => {
            if !(0.0..1.0).contains(&cfg.cd_overlap) {
                return contract("cd_overlap must lie in [0, 1) so target class lists differ");
            }
            let (source, rest) = half_split(cfg.n_classes, seed);
            let from_source = (cfg.cd_overlap * source.len() as f64).round() as usize;
            let from_rest = source.len() - from_source;
            if from_rest > rest.len() || rest.is_empty() {
                return contract("not enough non-source classes for the requested overlap");
            }
            let mut evals = vec![EvalSpec { name: "source".into(), domain: 0, classes: source.clone() }];
            let mut unseen = BTreeSet::new();
            for &d in &targets {
                let mut r = rng::stream(seed, &format!("cd-target:{d}"));
                let mut s = source.clone();
                let mut o = rest.clone();
                s.shuffle(&mut r);
                o.shuffle(&mut r);
                let mut classes: Vec<usize> = s[..from_source].iter().chain(&o[..from_rest]).copied().collect();
                classes.sort_unstable();
                unseen.extend(classes.iter().copied());
                evals.push(EvalSpec { name: format!("target{d}"), domain: d, classes });
            }
            (source, unseen.into_iter().collect(), evals)
        }
    };
    let domains = (0..cfg.n_domains.max(1))
        .map(|d| DomainSpec::new(seed, d, channels, cfg.shift, cfg.noise))
        .collect();
    Ok(ProtocolSplit {
        protocol,
        seed,
        shots,
        class_names: names,
        seen,
        unseen,
        source_domain: 0,
        target_domains: if protocol == Protocol::B2n { vec![] } else { targets },
        evals,
        domains,
    })
}

/// Builds a protocol split and renders its train and evaluation images.
///
/// Samples of each (domain, class) pair come from their own stream: the first
/// `eval_per_class` go to evaluation, the next `shots` to training.
pub fn build_split(
    protocol: Protocol,
    cfg: &DataConfig,
    shots: usize,
    seed: u64,
    world: &PatternWorld,
    text: &TextEncoder,
) -> Result<(ProtocolSplit, Datasets)> {
    let shape = world.shape();
    let split = plan_split(protocol, cfg, shots, seed, shape[2])?;
    let protos = split
        .class_names
        .iter()
        .map(|n| world.prototype(n, text))
        .collect::<Result<Vec<_>>>()?;

    let render = |domain: usize, class: usize, skip: usize, take: usize| -> Vec<Tensor> {
        let mut r = rng::stream(seed, &format!("pool:{domain}:{class}"));
        (0..skip + take)
            .map(|_| generate_sample(&protos[class], &split.domains[domain], shape, &mut r))
            .skip(skip)
            .collect()
    };

    let mut train = DomainBatch { domain: split.source_domain, images: vec![], labels: vec![] };
    for &c in &split.seen {
        for img in render(split.source_domain, c, cfg.eval_per_class, shots) {
            train.images.push(img);
            train.labels.push(c);
        }
    }
    let mut evals = Vec::with_capacity(split.evals.len());
    for spec in &split.evals {
        let mut data = DomainBatch { domain: spec.domain, images: vec![], labels: vec![] };
        for &c in &spec.classes {
            for img in render(spec.domain, c, 0, cfg.eval_per_class) {
                data.images.push(img);
                data.labels.push(c);
            }
        }
        evals.push(EvalSet { spec: spec.clone(), data });
    }
    Ok((split, Datasets { train, evals }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn b2n_halves_are_disjoint() {
        let s = plan_split(Protocol::B2n, &DataConfig::default(), 16, 4, 3).unwrap();
        assert_eq!(s.seen.len(), 8);
        assert_eq!(s.unseen.len(), 8);
        assert!(s.seen_set().is_disjoint(&s.unseen_set()));
        let odd = DataConfig { n_classes: 7, ..DataConfig::default() };
        let s = plan_split(Protocol::B2n, &odd, 4, 4, 3).unwrap();
        assert_eq!((s.seen.len(), s.unseen.len()), (4, 3));
    }

    #[test]
    fn ssmt_shares_all_classes() {
        let s = plan_split(Protocol::Ssmt, &DataConfig::default(), 16, 4, 3).unwrap();
        assert_eq!(s.seen.len(), 16);
        assert_eq!(s.evals.len(), 4);
        for e in &s.evals {
            assert_eq!(e.classes, s.seen);
        }
    }

    #[test]
    fn cd_targets_mix_source_and_other_classes() {
        let s = plan_split(Protocol::Cd, &DataConfig::default(), 16, 4, 3).unwrap();
        let source = s.seen_set();
        for e in s.evals.iter().skip(1) {
            let t: BTreeSet<usize> = e.classes.iter().copied().collect();
            assert_eq!(t.intersection(&source).count(), 4);
            assert_ne!(t, source);
        }
        let bad = DataConfig { cd_overlap: 1.0, ..DataConfig::default() };
        assert!(plan_split(Protocol::Cd, &bad, 16, 4, 3).is_err());
    }

    #[test]
    fn shots_beyond_pool_rejected() {
        let cfg = DataConfig { pool_per_class: 20, eval_per_class: 8, ..DataConfig::default() };
        assert!(plan_split(Protocol::B2n, &cfg, 12, 1, 3).is_ok());
        assert!(matches!(plan_split(Protocol::B2n, &cfg, 13, 1, 3), Err(Error::Contract(_))));
        assert!(plan_split(Protocol::B2n, &cfg, 0, 1, 3).is_err());
        let one = DataConfig { n_classes: 1, ..DataConfig::default() };
        assert!(plan_split(Protocol::B2n, &one, 1, 1, 3).is_err());
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in [Protocol::B2n, Protocol::Cd, Protocol::Ssmt] {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
        assert!("x".parse::<Protocol>().is_err());
    }
}
