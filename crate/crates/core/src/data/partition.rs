use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use super::DataError;

const PARTITION_FORMAT: &str = "fednas-partition";
const PARTITION_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    pub concentration: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.clients == 0 {
            return Err(DataError::InvalidSpec("client count must be at least 1".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(DataError::InvalidSpec(format!(
                "concentration must be finite and positive, got {}",
                self.concentration
            )));
        }
        Ok(())
    }
}

/// Per-client index lists into a parent dataset, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub spec: PartitionSpec,
    pub num_samples: usize,
    pub clients: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionDoc {
    format: String,
    version: u32,
    seed: u64,
    concentration: f64,
    clients: usize,
    num_samples: usize,
    client_indices: Vec<Vec<usize>>,
}

// Largest-remainder apportionment of `total` by `weights`, ties to the lower index.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn dirichlet(rng: &mut ChaCha8Rng, k: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("validated concentration");
    let draws: Vec<f64> = (0..k).map(|_| rng.sample(gamma)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        draws.iter().map(|g| g / sum).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Splits every class across clients with proportions drawn from a symmetric
/// Dirichlet. Per-class counts across clients sum exactly to the class total.
pub fn dirichlet_partition(labels: &[usize], num_classes: usize, spec: &PartitionSpec) -> Result<Partition, DataError> {
    spec.validate()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(DataError::Invalid(format!("label {bad} outside [0, {num_classes})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut clients = vec![Vec::new(); spec.clients];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let p = dirichlet(&mut rng, spec.clients, spec.concentration);
        members.shuffle(&mut rng);
        let counts = apportion(&p, members.len());
        let mut start = 0;
        for (k, &n) in counts.iter().enumerate() {
            clients[k].extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    for (k, list) in clients.iter_mut().enumerate() {
        if list.is_empty() {
            return Err(DataError::EmptyClient(k));
        }
        list.sort_unstable();
    }
    Ok(Partition {
        spec: *spec,
        num_samples: labels.len(),
        clients,
    })
}

impl Partition {
    /// Every index in `0..num_samples` appears in exactly one client list.
    pub fn check_coverage(&self) -> Result<(), DataError> {
        let mut seen = vec![false; self.num_samples];
        for (k, list) in self.clients.iter().enumerate() {
            if list.is_empty() {
                return Err(DataError::EmptyClient(k));
            }
            for &i in list {
                if i >= self.num_samples {
                    return Err(DataError::IndexOutOfRange {
                        index: i,
                        len: self.num_samples,
                    });
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(DataError::PartitionFormat(format!("index {i} assigned more than once")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(DataError::PartitionFormat(format!("index {missing} is not assigned")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = PartitionDoc {
            format: PARTITION_FORMAT.into(),
            version: PARTITION_VERSION,
            seed: self.spec.seed,
            concentration: self.spec.concentration,
            clients: self.spec.clients,
            num_samples: self.num_samples,
            client_indices: self.clients.clone(),
        };
        let mut s = serde_json::to_string(&doc).expect("partition serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let doc: PartitionDoc = serde_json::from_str(text).map_err(|e| DataError::PartitionFormat(e.to_string()))?;
        if doc.format != PARTITION_FORMAT || doc.version != PARTITION_VERSION {
            return Err(DataError::PartitionFormat(format!(
                "unsupported format {:?} version {}",
                doc.format, doc.version
            )));
        }
        if doc.client_indices.len() != doc.clients {
            return Err(DataError::PartitionFormat(format!(
                "header says {} clients, found {} index lists",
                doc.clients,
                doc.client_indices.len()
            )));
        }
        let partition = Partition {
            spec: PartitionSpec {
                clients: doc.clients,
                concentration: doc.concentration,
                seed: doc.seed,
            },
            num_samples: doc.num_samples,
            clients: doc.client_indices,
        };
        partition.spec.validate()?;
        partition.check_coverage()?;
        Ok(partition)
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }
}

/// `[client][class]` sample counts.
pub fn class_counts(partition: &Partition, labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    partition
        .clients
        .iter()
        .map(|list| {
            let mut row = vec![0; num_classes];
            for &i in list {
                row[labels[i]] += 1;
            }
            row
        })
        .collect()
}

/// Client-by-class count table: `client,c0,...,c{J-1},total`.
pub fn class_count_csv(counts: &[Vec<usize>]) -> String {
    let classes = counts.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["client".to_string()];
    header.extend((0..classes).map(|c| format!("c{c}")));
    header.push("total".into());
    w.write_record(&header).expect("in-memory write");
    for (k, row) in counts.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(usize::to_string));
        rec.push(row.iter().sum::<usize>().to_string());
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
}

/// Seeded shuffle, then the first `round(fraction * n)` indices (clamped so
/// both parts are non-empty) become the training part.
pub fn train_val_split(indices: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidSpec(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    if indices.len() < 2 {
        return Err(DataError::ShardTooSmall(indices.len()));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let val = shuffled.split_off(n_train);
    Ok((shuffled, val))
}

/// One client's local data: disjoint train and validation index lists.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl ClientShard {
    pub fn new(client_id: usize, train: Vec<usize>, val: Vec<usize>) -> Result<Self, DataError> {
        let t: BTreeSet<usize> = train.iter().copied().collect();
        let v: BTreeSet<usize> = val.iter().copied().collect();
        if t.len() != train.len() || v.len() != val.len() || !t.is_disjoint(&v) {
            return Err(DataError::Invalid(format!(
                "client {client_id}: train and validation indices overlap or repeat"
            )));
        }
        Ok(Self { client_id, train, val })
    }

    /// Splits the client's partition entry with `train_val_split`.
    pub fn from_indices(client_id: usize, indices: &[usize], train_fraction: f64, seed: u64) -> Result<Self, DataError> {
        let (train, val) = train_val_split(indices, train_fraction, seed)?;
        Self::new(client_id, train, val)
    }

    /// `N_k`: train plus validation count.
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Train then validation indices.
    pub fn all_indices(&self) -> Vec<usize> {
        self.train.iter().chain(&self.val).copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(classes: usize, per: usize) -> Vec<usize> {
        (0..classes * per).map(|i| i % classes).collect()
    }

    #[test]
    fn single_client_gets_everything() {
        let l = labels(3, 7);
        let p = dirichlet_partition(
            &l,
            3,
            &PartitionSpec {
                clients: 1,
                concentration: 0.5,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(p.clients[0], (0..21).collect::<Vec<_>>());
    }

    #[test]
    fn apportion_is_exact_and_breaks_ties_low() {
        assert_eq!(apportion(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(apportion(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        assert_eq!(apportion(&[1.0 / 3.0; 3], 100).iter().sum::<usize>(), 100);
    }

    #[test]
    fn empty_client_is_an_error() {
        let l = labels(1, 2);
        let err = dirichlet_partition(
            &l,
            1,
            &PartitionSpec {
                clients: 5,
                concentration: 0.5,
                seed: 3,
            },
        )
        .unwrap_err();
        assert!(matches!(err, DataError::EmptyClient(_)));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let l = labels(10, 40);
        let p = dirichlet_partition(
            &l,
            10,
            &PartitionSpec {
                clients: 4,
                concentration: 0.5,
                seed: 9,
            },
        )
        .unwrap();
        let back = Partition::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.spec.concentration.to_bits(), 0.5f64.to_bits());
    }

    #[test]
    fn split_five_five() {
        let (t, v) = train_val_split(&(0..10).collect::<Vec<_>>(), 0.5, 4).unwrap();
        assert_eq!((t.len(), v.len()), (5, 5));
    }

    #[test]
    fn split_depends_on_seed() {
        let idx: Vec<usize> = (0..16).collect();
        assert_eq!(train_val_split(&idx, 0.5, 1).unwrap(), train_val_split(&idx, 0.5, 1).unwrap());
        assert_ne!(train_val_split(&idx, 0.5, 1).unwrap(), train_val_split(&idx, 0.5, 2).unwrap());
    }

    #[test]
    fn split_rejects_tiny_shards() {
        assert!(matches!(train_val_split(&[3], 0.5, 0), Err(DataError::ShardTooSmall(1))));
        let (t, v) = train_val_split(&[3, 4], 0.9, 0).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
    }

    #[test]
    fn class_count_table_layout() {
        let csv = class_count_csv(&[vec![1, 2], vec![3, 0]]);
        assert_eq!(csv, "client,c0,c1,total\n0,1,2,3\n1,3,0,3\n");
    }

    #[test]
    fn overlapping_shard_is_rejected() {
        assert!(ClientShard::new(0, vec![1, 2], vec![2]).is_err());
    }
}
