use crate::error::{Error, Result};
use crate::rng::{derive_seed, CounterRng};

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub scale_index: usize,
    pub scale: f64,
    /// Indices into the shared training set.
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl ClientState {
    /// Seed derived from `(global_seed, id)` so adding clients never
    /// perturbs existing streams.
    pub fn new(id: usize, scale_index: usize, scale: f64, indices: Vec<usize>, global_seed: u64) -> Self {
        Self {
            id,
            scale_index,
            scale,
            indices,
            seed: derive_seed(global_seed, 0xC11E_0000 + id as u64),
        }
    }

    /// Private stream for one round of local training.
    pub fn round_rng(&self, round: usize) -> CounterRng {
        CounterRng::new(derive_seed(self.seed, round as u64))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// Scale index per client.
    pub assignment: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Clustering {
    pub fn counts(&self, scales: usize) -> Vec<usize> {
        let mut c = vec![0; scales];
        self.assignment.iter().for_each(|&s| c[s] += 1);
        c
    }
}

/// Maps each client's resource budget (a width fraction it can afford) to
/// the widest scale it can run; budgets below every scale get the smallest.
pub fn cluster_clients(resources: &[f64], scales: &[f64]) -> Result<Clustering> {
    if resources.is_empty() {
        return Err(Error::Argument("no clients to cluster".into()));
    }
    if scales.is_empty() {
        return Err(Error::Argument("empty scale set".into()));
    }
    let smallest = (0..scales.len())
        .min_by(|&a, &b| scales[a].total_cmp(&scales[b]))
        .expect("non-empty");
    let assignment: Vec<usize> = resources
        .iter()
        .map(|&r| {
            (0..scales.len())
                .filter(|&i| scales[i] <= r + 1e-12)
                .max_by(|&a, &b| scales[a].total_cmp(&scales[b]))
                .unwrap_or(smallest)
        })
        .collect();
    let mut clustering = Clustering {
        assignment,
        warnings: Vec::new(),
    };
    for (i, n) in clustering.counts(scales.len()).into_iter().enumerate() {
        if n == 0 {
            clustering
                .warnings
                .push(format!("scale {} has no clients", scales[i]));
        }
    }
    Ok(clustering)
}

/// Resource labels cycling through the scale set: client `i` gets `scales[i % S]`.
pub fn round_robin_resources(clients: usize, scales: &[f64]) -> Vec<f64> {
    (0..clients).map(|i| scales[i % scales.len()]).collect()
}

/// `ceil(fraction * N)` distinct clients, uniformly without replacement,
/// returned in ascending id order.
pub fn sample_participants(pool: &[usize], fraction: f64, rng: &mut CounterRng) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::Argument("empty client pool".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("participation {fraction} outside (0, 1]")));
    }
    let k = ((fraction * pool.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let k = k.min(pool.len());
    let mut ids = pool.to_vec();
    for i in 0..k {
        let j = i + rng.below((ids.len() - i) as u64) as usize;
        ids.swap(i, j);
    }
    let mut chosen = ids[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}
