//! Seeded synthetic bags: background Gaussian instances on a jittered grid,
//! with a spatially clustered group of shifted "witness" instances.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_bag, BagRecord, Manifest, Split};
use crate::error::{Error, Result};
use crate::graph::{Event, InstanceBag, Target};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    #[default]
    Classification,
    Survival,
}

impl std::str::FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(SynthTask::Classification),
            "survival" => Ok(SynthTask::Survival),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_bags: usize,
    pub task: SynthTask,
    pub input_dim: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Mean shift, in standard deviations, of witness instances.
    pub witness_shift: f64,
    /// Leading feature coordinates that carry the shift.
    pub witness_dims: usize,
    pub max_witnesses: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub censor_rate: f64,
    pub time_bins: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_bags: 350,
            task: SynthTask::Classification,
            input_dim: 32,
            min_instances: 50,
            max_instances: 200,
            witness_shift: 3.0,
            witness_dims: 8,
            max_witnesses: 5,
            val_fraction: 1.0 / 7.0,
            test_fraction: 2.0 / 7.0,
            censor_rate: 0.25,
            time_bins: 4,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::Config(why.to_string()));
        if self.n_bags < 4 {
            return bad("at least 4 bags are needed");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad("instance range must satisfy 1 <= min <= max");
        }
        if self.input_dim == 0 || self.witness_dims > self.input_dim {
            return bad("witness dims must fit within the input width");
        }
        if self.max_witnesses == 0 || self.max_witnesses > self.min_instances {
            return bad("witness count must lie within 1..=min_instances");
        }
        let (v, t) = (self.val_fraction, self.test_fraction);
        if !(0.0..1.0).contains(&v) || !(0.0..1.0).contains(&t) || v + t >= 1.0 {
            return bad("split fractions must leave a training split");
        }
        if !(0.0..1.0).contains(&self.censor_rate) || self.time_bins == 0 {
            return bad("censor rate must lie in [0, 1) and time bins be positive");
        }
        Ok(())
    }

    /// Bag counts per split: `(train, val, test)`.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_bags as f64;
        let val = ((n * self.val_fraction).round() as usize).max(1);
        let test = ((n * self.test_fraction).round() as usize).max(1);
        (self.n_bags - val - test, val, test)
    }
}

/// A generated bag with its split and the latent witness count.
#[derive(Debug, Clone)]
pub struct SynthBag {
    pub bag: InstanceBag,
    pub split: Split,
    pub witnesses: usize,
}

fn grid_coords(m: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let side = (m as f64).sqrt().ceil() as usize;
    (0..m)
        .map(|i| {
            let (row, col) = (i / side, i % side);
            // offset from the origin so cosine distances stay defined
            [
                1.0 + col as f64 + rng.random_range(-0.3..0.3),
                1.0 + row as f64 + rng.random_range(-0.3..0.3),
            ]
        })
        .collect()
}

/// The `count` instances nearest to a random centre on the grid.
fn witness_cluster(coords: &[[f64; 2]], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let centre = coords[rng.random_range(0..coords.len())];
    let mut idx: Vec<usize> = (0..coords.len()).collect();
    let dist = |i: usize| (coords[i][0] - centre[0]).powi(2) + (coords[i][1] - centre[1]).powi(2);
    idx.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

fn make_instances(cfg: &SynthConfig, witnesses: usize, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let m = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let coords = grid_coords(m, rng);
    let mut features: Vec<f64> = (0..m * cfg.input_dim).map(|_| StandardNormal.sample(rng)).collect();
    for i in witness_cluster(&coords, witnesses, rng) {
        for v in &mut features[i * cfg.input_dim..i * cfg.input_dim + cfg.witness_dims] {
            *v += cfg.witness_shift;
        }
    }
    // stored as f32 on disk; round now so in-memory and loaded bags agree
    let features = features.into_iter().map(|v| v as f32 as f64).collect();
    let coords = coords.iter().flatten().map(|&v| v as f32 as f64).collect();
    Ok((
        Tensor::new(vec![m, cfg.input_dim], features)?,
        Tensor::new(vec![m, 2], coords)?,
    ))
}

fn split_of(i: usize, sizes: (usize, usize, usize)) -> Split {
    if i < sizes.0 {
        Split::Train
    } else if i < sizes.0 + sizes.1 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Generates bags in memory. Split membership is by position after an rng shuffle.
pub fn synth_bags(cfg: &SynthConfig) -> Result<Vec<SynthBag>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes = cfg.split_sizes();
    let mut order: Vec<usize> = (0..cfg.n_bags).collect();
    order.shuffle(&mut rng);
    let mut split_by_bag = vec![Split::Train; cfg.n_bags];
    for (pos, &b) in order.iter().enumerate() {
        split_by_bag[b] = split_of(pos, sizes);
    }
    match cfg.task {
        SynthTask::Classification => classification_bags(cfg, &split_by_bag, &mut rng),
        SynthTask::Survival => survival_bags(cfg, &split_by_bag, &mut rng),
    }
}

fn classification_bags(cfg: &SynthConfig, splits: &[Split], rng: &mut ChaCha8Rng) -> Result<Vec<SynthBag>> {
    let mut labels: Vec<usize> = (0..cfg.n_bags).map(|_| usize::from(rng.random_bool(0.5))).collect();
    // every split needs both classes for the metrics to be defined
    for split in [Split::Train, Split::Val, Split::Test] {
        let members: Vec<usize> = (0..cfg.n_bags).filter(|&i| splits[i] == split).collect();
        if members.len() >= 2 && members.iter().all(|&i| labels[i] == labels[members[0]]) {
            labels[members[0]] ^= 1;
        }
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let witnesses = if label == 1 {
                rng.random_range(1..=cfg.max_witnesses)
            } else {
                0
            };
            let (features, coords) = make_instances(cfg, witnesses, rng)?;
            Ok(SynthBag {
                bag: InstanceBag::new(bag_id(i), features, coords, Target::Class(label))?,
                split: splits[i],
                witnesses,
            })
        })
        .collect()
}

fn survival_bags(cfg: &SynthConfig, splits: &[Split], rng: &mut ChaCha8Rng) -> Result<Vec<SynthBag>> {
    struct Raw {
        witnesses: usize,
        time: f64,
        event: Event,
        features: Tensor,
        coords: Tensor,
    }
    let mut raw = Vec::with_capacity(cfg.n_bags);
    for _ in 0..cfg.n_bags {
        let witnesses = rng.random_range(0..=cfg.max_witnesses);
        let (features, coords) = make_instances(cfg, witnesses, rng)?;
        let rate = 0.1 * (0.6 * witnesses as f64).exp();
        let time: f64 = Exp::new(rate).expect("positive rate").sample(rng);
        let (time, event) = if rng.random_bool(cfg.censor_rate) {
            (time * rng.random_range(0.0..1.0), Event::Censored)
        } else {
            (time, Event::Observed)
        };
        raw.push(Raw {
            witnesses,
            time,
            event,
            features,
            coords,
        });
    }
    let mut observed: Vec<f64> = raw
        .iter()
        .zip(splits)
        .filter(|(r, &s)| s == Split::Train && r.event == Event::Observed)
        .map(|(r, _)| r.time)
        .collect();
    if observed.is_empty() {
        observed = raw.iter().map(|r| r.time).collect();
    }
    let edges = quantile_edges(&mut observed, cfg.time_bins);
    raw.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let time_bin = edges.iter().filter(|&&e| r.time >= e).count();
            let target = Target::Survival {
                time_bin,
                event: r.event,
            };
            Ok(SynthBag {
                bag: InstanceBag::new(bag_id(i), r.features, r.coords, target)?,
                split: splits[i],
                witnesses: r.witnesses,
            })
        })
        .collect()
}

/// Interior cut points splitting `values` into `bins` equal-count groups.
fn quantile_edges(values: &mut [f64], bins: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    (1..bins).map(|q| values[q * values.len() / bins]).collect()
}

fn bag_id(i: usize) -> String {
    format!("bag_{i:04}")
}

/// Writes bag files and `manifest.json` under `out_dir`.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    let bags = synth_bags(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(bags.len());
    for b in &bags {
        let file = format!("{}.mmb", b.bag.bag_id);
        write_bag(&out_dir.join(&file), &b.bag.features, &b.bag.coords)?;
        let (label, time_bin, event) = match b.bag.target {
            Target::Class(c) => (Some(c), None, None),
            Target::Survival { time_bin, event } => (None, Some(time_bin), Some(event)),
        };
        records.push(BagRecord {
            id: b.bag.bag_id.clone(),
            file: file.into(),
            split: b.split,
            label,
            time_bin,
            event,
        });
    }
    let manifest = Manifest {
        dim: cfg.input_dim,
        bags: records,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: SynthTask) -> SynthConfig {
        SynthConfig {
            n_bags: 40,
            task,
            min_instances: 10,
            max_instances: 20,
            ..Default::default()
        }
    }

    #[test]
    fn default_split_sizes() {
        assert_eq!(SynthConfig::default().split_sizes(), (200, 50, 100));
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for task in [SynthTask::Classification, SynthTask::Survival] {
            let cfg = small(task);
            synth_generate(&cfg, a.path()).unwrap();
            synth_generate(&cfg, b.path()).unwrap();
            let mut names: Vec<_> = fs::read_dir(a.path())
                .unwrap()
                .map(|e| e.unwrap().file_name())
                .collect();
            names.sort();
            assert_eq!(names.len(), 41);
            for n in names {
                assert_eq!(
                    fs::read(a.path().join(&n)).unwrap(),
                    fs::read(b.path().join(&n)).unwrap()
                );
            }
        }
    }

    #[test]
    fn loaded_bags_match_memory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(SynthTask::Classification);
        let manifest = synth_generate(&cfg, dir.path()).unwrap();
        let loaded = Manifest::load(&dir.path().join("manifest.json")).unwrap();
        let mem = synth_bags(&cfg).unwrap();
        for (rec, sb) in loaded.bags.iter().zip(&mem) {
            let bag = loaded.load_bag(rec).unwrap();
            assert_eq!(bag, sb.bag);
            assert_eq!(rec.split, sb.split);
        }
        assert_eq!(manifest.bags, loaded.bags);
    }

    #[test]
    fn witnesses_carry_the_shift() {
        let cfg = small(SynthTask::Classification);
        for sb in synth_bags(&cfg).unwrap() {
            let m = sb.bag.num_instances();
            assert!((10..=20).contains(&m));
            let shifted = (0..m)
                .filter(|&i| sb.bag.features.row(i)[..8].iter().sum::<f64>() / 8.0 > 1.5)
                .count();
            match sb.bag.target {
                Target::Class(1) => assert!((1..=5).contains(&sb.witnesses) && shifted >= 1),
                _ => assert_eq!(sb.witnesses, 0),
            }
        }
    }

    #[test]
    fn label_balance_within_binomial_bounds() {
        let cfg = SynthConfig {
            n_bags: 200,
            min_instances: 5,
            max_instances: 6,
            ..Default::default()
        };
        let pos = synth_bags(&cfg)
            .unwrap()
            .iter()
            .filter(|b| b.bag.target == Target::Class(1))
            .count();
        // 200 fair draws: sd = sqrt(50) ≈ 7.07, allow 4 sd
        assert!((72..=128).contains(&pos), "{pos}");
    }

    #[test]
    fn every_split_has_both_classes() {
        let cfg = SynthConfig {
            n_bags: 7,
            min_instances: 5,
            max_instances: 6,
            ..Default::default()
        };
        for seed in 0..20 {
            let bags = synth_bags(&SynthConfig { seed, ..cfg.clone() }).unwrap();
            for split in [Split::Train, Split::Val, Split::Test] {
                let labels: Vec<_> = bags.iter().filter(|b| b.split == split).map(|b| b.bag.target).collect();
                if labels.len() >= 2 {
                    assert!(labels.contains(&Target::Class(0)) && labels.contains(&Target::Class(1)));
                }
            }
        }
    }

    #[test]
    fn survival_targets_are_binned() {
        let cfg = SynthConfig {
            n_bags: 120,
            min_instances: 5,
            max_instances: 6,
            task: SynthTask::Survival,
            ..Default::default()
        };
        let bags = synth_bags(&cfg).unwrap();
        let mut censored = 0;
        let mut counts = [0usize; 4];
        for b in &bags {
            let Target::Survival { time_bin, event } = b.bag.target else {
                panic!()
            };
            counts[time_bin] += 1;
            censored += usize::from(event == Event::Censored);
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        assert!((10..=50).contains(&censored), "{censored}");
    }

    #[test]
    fn config_checks() {
        assert!(synth_bags(&SynthConfig {
            n_bags: 3,
            ..Default::default()
        })
        .is_err());
        assert!(synth_bags(&SynthConfig {
            witness_dims: 40,
            ..Default::default()
        })
        .is_err());
        assert_eq!(quantile_edges(&mut [4.0, 1.0, 3.0, 2.0], 4), vec![2.0, 3.0, 4.0]);
    }
}
