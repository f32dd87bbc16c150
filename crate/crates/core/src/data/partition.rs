//! Client data partitioning.
//!
//! Protocol, per class in ascending label order:
//! 1. collect that class's sample indices in ascending order and shuffle them;
//! 2. draw client proportions (Dirichlet: one `Gamma(alpha)` per client in
//!    client order, normalized; IID: equal shares);
//! 3. convert to counts by largest remainder (ties to the lower client id;
//!    IID leftovers rotate across classes so client totals stay within one);
//! 4. hand out consecutive slices of the shuffled list in client order.

use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartitionMode {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    /// Sorted sample indices per client.
    pub shards: Vec<Vec<usize>>,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl PartitionPlan {
    pub fn class_histogram(&self, labels: &[usize], class_count: usize) -> Vec<Vec<usize>> {
        self.shards
            .iter()
            .map(|s| {
                let mut h = vec![0; class_count];
                s.iter().for_each(|&i| h[labels[i]] += 1);
                h
            })
            .collect()
    }
}

/// Largest-remainder apportionment of `total` items by `shares` (summing to 1).
pub(crate) fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|q| q * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub fn dirichlet_partition(
    labels: &[usize],
    n_clients: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::Argument("need at least one client".into()));
    }
    if let PartitionMode::Dirichlet { alpha } = mode {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Argument(format!("Dirichlet alpha {alpha} must be positive")));
        }
    }
    let mut rng = CounterRng::new(seed);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut shards = vec![Vec::new(); n_clients];
    let mut warnings = Vec::new();
    let mut rotate = 0usize;
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < n_clients {
            warnings.push(format!(
                "class {class} has {} samples for {n_clients} clients; some shards get none",
                members.len()
            ));
        }
        rng.shuffle(&mut members);
        let counts = match mode {
            PartitionMode::Dirichlet { alpha } => {
                let q = rng.dirichlet(alpha, n_clients);
                largest_remainder(&q, members.len())
            }
            PartitionMode::Iid => {
                let base = members.len() / n_clients;
                let extra = members.len() % n_clients;
                let mut c = vec![base; n_clients];
                for j in 0..extra {
                    c[(rotate + j) % n_clients] += 1;
                }
                rotate = (rotate + extra) % n_clients;
                c
            }
        };
        let mut at = 0;
        for (client, &n) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&members[at..at + n]);
            at += n;
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    let empty = shards.iter().filter(|s| s.is_empty()).count();
    if empty > 0 {
        warnings.push(format!("{empty} client(s) received no samples"));
    }
    Ok(PartitionPlan {
        shards,
        alpha: match mode {
            PartitionMode::Dirichlet { alpha } => Some(alpha),
            PartitionMode::Iid => None,
        },
        seed,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(classes: usize, per: usize) -> Vec<usize> {
        (0..classes * per).map(|i| i % classes).collect()
    }

    fn assert_partition(plan: &PartitionPlan, n: usize) {
        let mut all: Vec<usize> = plan.shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = balanced(3, 5);
        let plan = dirichlet_partition(&labels, 1, PartitionMode::Dirichlet { alpha: 0.3 }, 1).unwrap();
        assert_eq!(plan.shards[0], (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn iid_is_even() {
        let labels = balanced(10, 100);
        let plan = dirichlet_partition(&labels, 10, PartitionMode::Iid, 2).unwrap();
        assert_partition(&plan, 1000);
        for s in &plan.shards {
            assert!((s.len() as i64 - 100).abs() <= 1);
        }
        let labels = balanced(3, 7);
        let plan = dirichlet_partition(&labels, 4, PartitionMode::Iid, 2).unwrap();
        for h in plan.class_histogram(&labels, 3) {
            for c in h {
                assert!((c as f64 - 7.0 / 4.0).abs() <= 1.0);
            }
        }
        let totals: Vec<usize> = plan.shards.iter().map(Vec::len).collect();
        assert!(totals.iter().max().unwrap() - totals.iter().min().unwrap() <= 1);
    }

    #[test]
    fn largest_remainder_is_exhaustive() {
        // exact 1.5, 0.75, 0.75: floors 1,0,0 and both 0.75 remainders win
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 3), vec![1, 1, 1]);
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.1, 0.2, 0.7], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn invalid_arguments() {
        assert!(dirichlet_partition(&[0, 1], 0, PartitionMode::Iid, 0).is_err());
        assert!(dirichlet_partition(&[0, 1], 2, PartitionMode::Dirichlet { alpha: -1.0 }, 0).is_err());
    }

    #[test]
    fn sparse_classes_warn() {
        let plan = dirichlet_partition(&[0, 1], 5, PartitionMode::Iid, 0).unwrap();
        assert!(!plan.warnings.is_empty());
        assert_partition(&plan, 2);
    }
}
