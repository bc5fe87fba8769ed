use rand::seq::SliceRandom;
use rand::Rng;

use super::dataset::Dataset;
use super::ExciteError;
use crate::plants::SampledTrajectory;

/// Borrowed slice `t_j ..= t_{j+m}` of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window<'a> {
    pub n: usize,
    pub m: usize,
    /// `m + 1` inputs; only the first `m` drive the prediction.
    pub inputs: &'a [f64],
    /// Row-major `(m + 1) × n` states.
    pub states: &'a [f64],
}

impl<'a> Window<'a> {
    pub fn of(traj: &'a SampledTrajectory, start: usize, m: usize) -> Result<Self, ExciteError> {
        if m < 1 || start + m >= traj.len() {
            return Err(ExciteError::WindowTooLong { m, len: traj.len() });
        }
        let n = traj.n;
        Ok(Self {
            n,
            m,
            inputs: &traj.inputs[start..=start + m],
            states: &traj.states[start * n..(start + m + 1) * n],
        })
    }

    pub fn state(&self, i: usize) -> &'a [f64] {
        &self.states[i * self.n..(i + 1) * self.n]
    }
}

/// Location of a window inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowRef {
    pub trajectory: usize,
    pub start: usize,
}

/// Enumerates every valid `(trajectory, j)` of a dataset for rollout
/// length `m`.
#[derive(Debug, Clone)]
pub struct WindowSampler<'a> {
    dataset: &'a Dataset,
    m: usize,
    all: Vec<WindowRef>,
}

impl<'a> WindowSampler<'a> {
    pub fn new(dataset: &'a Dataset, m: usize) -> Result<Self, ExciteError> {
        if m < 1 {
            return Err(ExciteError::WindowTooLong { m, len: 0 });
        }
        let mut all = Vec::new();
        for (k, traj) in dataset.trajectories.iter().enumerate() {
            if traj.len() < m + 1 {
                return Err(ExciteError::WindowTooLong { m, len: traj.len() });
            }
            all.extend((0..traj.len() - m).map(|start| WindowRef { trajectory: k, start }));
        }
        Ok(Self { dataset, m, all })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.all.len()
    }

    pub fn is_empty(&self) -> bool {
        self.all.is_empty()
    }

    pub fn refs(&self) -> &[WindowRef] {
        &self.all
    }

    pub fn get(&self, r: WindowRef) -> Window<'a> {
        Window::of(&self.dataset.trajectories[r.trajectory], r.start, self.m).expect("enumerated window is valid")
    }

    /// Every valid window exactly once, in an order shuffled by `rng`.
    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<WindowRef> {
        let mut order = self.all.clone();
        order.shuffle(rng);
        order
    }

    /// One uniformly random valid window.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Window<'a> {
        self.get(self.all[rng.random_range(0..self.all.len())])
    }
}

/// Shuffled epoch of windows of length `m` over `dataset`.
pub fn make_windows<'a, R: Rng + ?Sized>(
    dataset: &'a Dataset,
    m: usize,
    rng: &mut R,
) -> Result<impl Iterator<Item = Window<'a>> + 'a, ExciteError> {
    let sampler = WindowSampler::new(dataset, m)?;
    let order = sampler.epoch(rng);
    Ok(order.into_iter().map(move |r| sampler.get(r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::{PlantId, PlantSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn dataset(len: usize, count: usize) -> Dataset {
        let trajs = (0..count)
            .map(|k| SampledTrajectory {
                period: 0.005,
                t0: 0.0,
                n: 2,
                inputs: (0..len).map(|i| (i + 1000 * k) as f64).collect(),
                states: (0..2 * len).map(|i| (i + 10_000 * k) as f64).collect(),
            })
            .collect();
        Dataset::from_trajectories(&PlantSpec::reference(PlantId::C1), trajs).unwrap()
    }

    #[test]
    fn counts_distinct_starts() {
        let data = dataset(401, 3);
        let sampler = WindowSampler::new(&data, 16).unwrap();
        assert_eq!(sampler.len(), 3 * 385);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let epoch = sampler.epoch(&mut rng);
        let unique: HashSet<_> = epoch.iter().collect();
        assert_eq!(unique.len(), epoch.len());
    }

    #[test]
    fn maximal_window_is_unique() {
        let data = dataset(401, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(make_windows(&data, 400, &mut rng).unwrap().count(), 1);
        assert!(matches!(
            WindowSampler::new(&data, 401),
            Err(ExciteError::WindowTooLong { .. })
        ));
    }

    #[test]
    fn shuffle_is_seeded() {
        let data = dataset(100, 2);
        let sampler = WindowSampler::new(&data, 8).unwrap();
        let order = |seed| sampler.epoch(&mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(order(1), order(1));
        assert_ne!(order(1), order(2));
    }

    #[test]
    fn windows_alias_dataset_storage() {
        let data = dataset(50, 2);
        let sampler = WindowSampler::new(&data, 4).unwrap();
        let w = sampler.get(WindowRef { trajectory: 1, start: 7 });
        assert_eq!(w.inputs.len(), 5);
        assert_eq!(w.state(0), data.trajectories[1].state(7));
        assert_eq!(w.state(4), data.trajectories[1].state(11));
        assert!(std::ptr::eq(w.inputs.as_ptr(), &data.trajectories[1].inputs[7]));
    }
}
