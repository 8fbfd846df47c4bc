//! Label statistics and non-IID data partitioning.
//!
//! A client's statistical heterogeneity is summarized by its empirical label
//! distribution. The joint distribution of a client subset is the
//! count-weighted mixture of the members' distributions, and closeness to the
//! global distribution is measured by KL divergence in nats.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seeding;

/// In-memory dataset: row-major features plus integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        feature_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::validation("feature_dim and num_classes must be positive"));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(Error::validation(format!(
                "feature buffer has {} values, expected {} rows x {} dims",
                features.len(),
                labels.len(),
                feature_dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset { features, labels, feature_dim, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// New dataset holding the given rows (in the given order).
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { features, labels, feature_dim: self.feature_dim, num_classes: self.num_classes }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Probability vector over class labels, backed by a sample count.
///
/// The all-zero vector with `count == 0` is the designated empty value; it
/// may be mixed into a joint distribution (with weight zero) but may not
/// enter KL computations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    probs: Vec<f64>,
    count: usize,
    num_classes: usize,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>, count: usize) -> Result<Self> {
        let num_classes = probs.len();
        if num_classes == 0 {
            return Err(Error::validation("distribution needs at least one class"));
        }
        if count == 0 {
            if probs.iter().any(|&p| p != 0.0) {
                return Err(Error::validation("empty distribution must have all-zero probs"));
            }
            return Ok(LabelDistribution { probs, count, num_classes });
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::validation("probabilities must be finite and nonnegative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(LabelDistribution { probs, count, num_classes })
    }

    pub fn empty(num_classes: usize) -> Self {
        LabelDistribution { probs: vec![0.0; num_classes], count: 0, num_classes }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// One client's shard of the data plus its label statistics.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub data: Dataset,
    pub label_dist: LabelDistribution,
}

impl ClientDataset {
    pub fn new(client_id: usize, data: Dataset) -> Result<Self> {
        let label_dist = empirical_distribution(data.labels(), data.num_classes())?;
        Ok(ClientDataset { client_id, data, label_dist })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// How to split a dataset across clients.
#[derive(Debug, Clone, PartialEq)]
pub enum PartitionMode {
    /// Equal-size shards drawn from exactly `classes_per_client` classes.
    BalancedK { classes_per_client: usize },
    /// Per-class client shares drawn from a Dirichlet distribution.
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::validation("num_clients must be positive"));
        }
        match self.mode {
            PartitionMode::BalancedK { classes_per_client } => {
                if classes_per_client == 0 {
                    return Err(Error::validation("classes_per_client must be positive"));
                }
                if classes_per_client > num_classes {
                    return Err(Error::validation(format!(
                        "classes_per_client {} exceeds num_classes {}",
                        classes_per_client, num_classes
                    )));
                }
            }
            PartitionMode::Dirichlet { alpha } => {
                if !(alpha > 0.0) || !alpha.is_finite() {
                    return Err(Error::validation("dirichlet alpha must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Empirical label distribution of a label vector.
///
/// Empty input yields the designated empty distribution.
pub fn empirical_distribution(labels: &[usize], num_classes: usize) -> Result<LabelDistribution> {
    if num_classes == 0 {
        return Err(Error::validation("num_classes must be positive"));
    }
    if labels.is_empty() {
        return Ok(LabelDistribution::empty(num_classes));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::validation(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        counts[y] += 1;
    }
    let total = labels.len() as f64;
    let probs = counts.iter().map(|&c| c as f64 / total).collect();
    LabelDistribution::new(probs, labels.len())
}

/// Count-weighted mixture of member distributions.
///
/// The result's probability of class c is the fraction of all members'
/// samples that carry class c; empty members contribute nothing.
pub fn joint_distribution(members: &[LabelDistribution]) -> Result<LabelDistribution> {
    let first = members
        .first()
        .ok_or_else(|| Error::validation("joint distribution needs at least one member"))?;
    let num_classes = first.num_classes;
    let mut weighted = vec![0.0f64; num_classes];
    let mut total = 0usize;
    for m in members {
        if m.num_classes != num_classes {
            return Err(Error::validation(format!(
                "member has {} classes, expected {}",
                m.num_classes, num_classes
            )));
        }
        total += m.count;
        let w = m.count as f64;
        for (acc, &p) in weighted.iter_mut().zip(&m.probs) {
            *acc += w * p;
        }
    }
    if total == 0 {
        return Err(Error::validation("joint distribution of all-empty members"));
    }
    let t = total as f64;
    let probs = weighted.into_iter().map(|v| v / t).collect();
    LabelDistribution::new(probs, total)
}

/// KL divergence KL(p || q) in nats.
///
/// Uses the convention 0 * ln(0/q) = 0. Where p places mass on a class with
/// q = 0 the divergence is +infinity, which makes infeasible subsets sort
/// last without a special case.
pub fn kl_divergence(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64> {
    if p.num_classes != q.num_classes {
        return Err(Error::validation(format!(
            "class count mismatch: {} vs {}",
            p.num_classes, q.num_classes
        )));
    }
    if p.is_empty() || q.is_empty() {
        return Err(Error::validation("empty distribution may not enter KL computations"));
    }
    let mut sum = 0.0f64;
    for (&pc, &qc) in p.probs.iter().zip(&q.probs) {
        if pc > 0.0 {
            if qc <= 0.0 {
                return Ok(f64::INFINITY);
            }
            sum += pc * (pc / qc).ln();
        }
    }
    // Gibbs: the true value is nonnegative; rounding can leave -1e-17.
    Ok(sum.max(0.0))
}

/// Split a dataset across clients according to the spec.
///
/// The union of the returned shards is exactly the input multiset, and the
/// assignment is deterministic given the spec's seed.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    if dataset.is_empty() {
        return Err(Error::validation("cannot partition an empty dataset"));
    }
    spec.validate(dataset.num_classes())?;
    let mut rng = seeding::stream(spec.seed, "partition", &[]);
    let assignments = match spec.mode {
        PartitionMode::BalancedK { classes_per_client } => {
            balanced_assignments(dataset, classes_per_client, spec.num_clients, &mut rng)?
        }
        PartitionMode::Dirichlet { alpha } => {
            dirichlet_assignments(dataset, alpha, spec.num_clients, &mut rng)?
        }
    };
    assignments
        .into_iter()
        .enumerate()
        .map(|(client_id, mut idx)| {
            idx.sort_unstable();
            ClientDataset::new(client_id, dataset.select(&idx))
        })
        .collect()
}

/// Per-class sample index lists, each seeded-shuffled.
fn shuffled_class_indices(dataset: &Dataset, rng: &mut ChaCha12Rng) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    for idx in &mut by_class {
        idx.shuffle(rng);
    }
    by_class
}

/// Shard-style split: every client receives an equal share (within one
/// sample) drawn from exactly K classes.
///
/// Each class c is granted s_c shards in proportion to its sample count,
/// with 1 <= s_c <= min(M, n_c); shards are dealt to the clients with the
/// most unfilled shard capacity (seeded tie-breaking), and each class's
/// samples are split evenly over its shards with the larger halves steered
/// toward the currently smallest clients.
fn balanced_assignments(
    dataset: &Dataset,
    k: usize,
    num_clients: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Vec<usize>>> {
    let counts = dataset.class_counts();
    let present: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    let total_slots = num_clients * k;
    let n = dataset.len();

    // Slot capacity per class: at most one shard per client, at least one
    // sample per shard.
    let cap: Vec<usize> = present.iter().map(|&c| counts[c].min(num_clients)).collect();
    let cap_sum: usize = cap.iter().sum();
    if present.len() > total_slots || cap_sum < total_slots {
        return Err(Error::validation(format!(
            "balanced split infeasible: {} clients x {} classes each demand {} class shards, \
             but the dataset's class supply admits between {} and {}",
            num_clients,
            k,
            total_slots,
            present.len(),
            cap_sum
        )));
    }

    // Proportional shard counts via largest remainder, clamped to [1, cap].
    let mut slots = vec![0usize; present.len()];
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(present.len());
    let mut assigned = 0usize;
    for (j, &c) in present.iter().enumerate() {
        let share = counts[c] as f64 * total_slots as f64 / n as f64;
        let base = (share.floor() as usize).clamp(1, cap[j]);
        slots[j] = base;
        assigned += base;
        remainders.push((share - share.floor(), j));
    }
    // Hand out missing slots by largest remainder; reclaim surplus from the
    // largest shard counts. Both loops terminate because cap_sum bounds hold.
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut r = 0;
    while assigned < total_slots {
        let j = remainders[r % remainders.len()].1;
        if slots[j] < cap[j] {
            slots[j] += 1;
            assigned += 1;
        }
        r += 1;
    }
    while assigned > total_slots {
        let j = (0..slots.len()).max_by_key(|&j| (slots[j], j)).unwrap();
        if slots[j] <= 1 {
            return Err(Error::validation(
                "balanced split infeasible: cannot honor one shard per present class",
            ));
        }
        slots[j] -= 1;
        assigned -= 1;
    }

    // Deal shards to clients: most free capacity first, seeded tie order.
    let mut tie: Vec<usize> = (0..num_clients).collect();
    tie.shuffle(rng);
    let mut tie_rank = vec![0usize; num_clients];
    for (rank, &client) in tie.iter().enumerate() {
        tie_rank[client] = rank;
    }
    let mut free = vec![k; num_clients];
    let mut shard_owner: Vec<Vec<usize>> = vec![Vec::new(); present.len()];
    let mut class_order: Vec<usize> = (0..present.len()).collect();
    class_order.sort_by(|&a, &b| slots[b].cmp(&slots[a]).then(a.cmp(&b)));
    for &j in &class_order {
        let mut clients: Vec<usize> = (0..num_clients).filter(|&m| free[m] > 0).collect();
        clients.sort_by(|&a, &b| free[b].cmp(&free[a]).then(tie_rank[a].cmp(&tie_rank[b])));
        if clients.len() < slots[j] {
            return Err(Error::validation(
                "balanced split infeasible: class shard demand exceeds free client capacity",
            ));
        }
        for &m in clients.iter().take(slots[j]) {
            free[m] -= 1;
            shard_owner[j].push(m);
        }
    }

    // Per-(client, class) sample counts: split each class evenly over its
    // shards, steering the remainder chunks toward the smallest clients.
    let mut alloc: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); num_clients];
    let mut totals = vec![0usize; num_clients];
    let mut class_sizes: Vec<usize> = (0..present.len()).collect();
    class_sizes.sort_by(|&a, &b| counts[present[b]].cmp(&counts[present[a]]).then(a.cmp(&b)));
    for &j in &class_sizes {
        let c = present[j];
        let s = slots[j];
        let base = counts[c] / s;
        let extra = counts[c] % s;
        let mut owners = shard_owner[j].clone();
        owners.sort_by(|&a, &b| totals[a].cmp(&totals[b]).then(tie_rank[a].cmp(&tie_rank[b])));
        for (rank, &m) in owners.iter().enumerate() {
            let take = base + usize::from(rank < extra);
            alloc[m].insert(c, take);
            totals[m] += take;
        }
    }

    // Even per-class splits alone cannot always equalize client totals.
    // Repair by shifting single samples from over-full to under-full clients
    // along chains of shared classes; a donor slot always keeps one sample.
    let lo = n / num_clients;
    let hi = lo + usize::from(n % num_clients != 0);
    let mut moves = 0usize;
    let move_budget = 4 * n;
    loop {
        let over = (0..num_clients).find(|&m| totals[m] > hi);
        let under = (0..num_clients).any(|m| totals[m] < lo);
        let source = match over {
            Some(m) => m,
            None if !under => break,
            // Totals can also be all <= hi with some < lo (when n divides
            // unevenly); donate from a client sitting at hi.
            None => match (0..num_clients).find(|&m| totals[m] == hi) {
                Some(m) => m,
                None => break,
            },
        };
        if moves >= move_budget {
            return Err(Error::validation(
                "balanced split infeasible: rebalancing did not converge",
            ));
        }
        // BFS from the source to any under-target client; an edge m -> m2
        // exists when m can give one sample of a shared class to m2.
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; num_clients];
        let mut visited = vec![false; num_clients];
        visited[source] = true;
        let mut queue = std::collections::VecDeque::from([source]);
        let mut reached = None;
        'bfs: while let Some(m) = queue.pop_front() {
            for (&c, &cnt) in &alloc[m] {
                if cnt < 2 {
                    continue;
                }
                for m2 in 0..num_clients {
                    if !visited[m2] && m2 != m && alloc[m2].contains_key(&c) {
                        visited[m2] = true;
                        parent[m2] = Some((m, c));
                        if totals[m2] < lo {
                            reached = Some(m2);
                            break 'bfs;
                        }
                        queue.push_back(m2);
                    }
                }
            }
        }
        let Some(mut m2) = reached else {
            return Err(Error::validation(format!(
                "balanced split infeasible: the class supply pattern cannot reach an equal \
                 split ({lo}..={hi} samples per client)"
            )));
        };
        while let Some((m, c)) = parent[m2] {
            *alloc[m].get_mut(&c).unwrap() -= 1;
            *alloc[m2].get_mut(&c).unwrap() += 1;
            m2 = m;
        }
        totals[source] -= 1;
        totals[reached.unwrap()] += 1;
        moves += 1;
    }

    // Materialize: hand each class's shuffled indices to its owners in
    // ascending client order.
    let by_class = shuffled_class_indices(dataset, rng);
    let mut cursor = vec![0usize; counts.len()];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (m, client_alloc) in alloc.iter().enumerate() {
        for (&c, &take) in client_alloc {
            out[m].extend_from_slice(&by_class[c][cursor[c]..cursor[c] + take]);
            cursor[c] += take;
        }
    }
    for (m, idx) in out.iter().enumerate() {
        debug_assert!(idx.len() >= lo && idx.len() <= hi, "client {m} holds {}", idx.len());
        debug_assert_eq!(alloc[m].len(), k);
    }
    Ok(out)
}

/// Dirichlet split: for each class, client shares are Gamma(alpha, 1) draws
/// normalized across clients; counts are rounded by largest remainder so the
/// class's samples are conserved exactly.
fn dirichlet_assignments(
    dataset: &Dataset,
    alpha: f64,
    num_clients: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Vec<usize>>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::validation(format!("invalid dirichlet alpha: {e}")))?;
    let by_class = shuffled_class_indices(dataset, rng);
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for idx in by_class.iter().filter(|idx| !idx.is_empty()) {
        let n_c = idx.len();
        let mut draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if !(sum > 0.0) {
            // All draws underflowed (tiny alpha); fall back to one client.
            let lucky = rng.gen_range(0..num_clients);
            draws = vec![0.0; num_clients];
            draws[lucky] = 1.0;
        } else {
            for d in &mut draws {
                *d /= sum;
            }
        }
        let mut alloc: Vec<usize> = draws.iter().map(|&p| (p * n_c as f64).floor() as usize).collect();
        let mut leftover = n_c - alloc.iter().sum::<usize>();
        let mut frac: Vec<(f64, usize)> = draws
            .iter()
            .enumerate()
            .map(|(m, &p)| (p * n_c as f64 - (p * n_c as f64).floor(), m))
            .collect();
        frac.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut next = 0;
        while leftover > 0 {
            alloc[frac[next % frac.len()].1] += 1;
            leftover -= 1;
            next += 1;
        }
        let mut cursor = 0;
        for (m, &take) in alloc.iter().enumerate() {
            out[m].extend_from_slice(&idx[cursor..cursor + take]);
            cursor += take;
        }
        debug_assert_eq!(cursor, n_c);
    }
    Ok(out)
}

/// Gaussian blob dataset: `per_class` points per class around separated
/// centers, noise scale `spread`. Deterministic given the seed.
///
/// Centers sit on distinct coordinate axes when the feature space is wide
/// enough, otherwise on seeded random unit directions.
pub fn synth_blobs(
    num_classes: usize,
    dims: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dims == 0 || per_class == 0 {
        return Err(Error::validation("num_classes, dims, per_class must be positive"));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::validation("spread must be finite and nonnegative"));
    }
    let mut rng = seeding::stream(seed, "blobs", &[]);
    let mut centers = vec![vec![0.0f64; dims]; num_classes];
    if dims >= num_classes {
        for (c, center) in centers.iter_mut().enumerate() {
            center[c] = 1.0;
        }
    } else {
        for center in &mut centers {
            let mut norm = 0.0;
            for v in center.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
                norm += *v * *v;
            }
            let norm = norm.sqrt().max(1e-12);
            for v in center.iter_mut() {
                *v /= norm;
            }
        }
    }
    let mut features = Vec::with_capacity(num_classes * per_class * dims);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in center {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(mu + spread * noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, dims, num_classes)
}

/// Load a dataset from a CSV file: header row, one sample per row, real
/// features in all but the last column, integer class label last.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse("empty CSV file"))?;
    let columns = header.split(',').count();
    if columns < 2 {
        return Err(Error::parse("CSV needs at least one feature column and a label"));
    }
    let dim = columns - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(Error::parse(format!(
                "line {}: expected {} fields, found {}",
                lineno + 1,
                columns,
                fields.len()
            )));
        }
        for f in &fields[..dim] {
            let v: f64 = f.trim().parse().map_err(|_| {
                Error::parse(format!("line {}: bad feature value {f:?}", lineno + 1))
            })?;
            features.push(v);
        }
        let y: usize = fields[dim].trim().parse().map_err(|_| {
            Error::parse(format!("line {}: bad label {:?}", lineno + 1, fields[dim]))
        })?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::parse("CSV contains no data rows"));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    Dataset::new(features, labels, dim, num_classes)
}
