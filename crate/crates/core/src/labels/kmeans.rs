use rand::Rng;

use super::LabelError;

/// Lloyd's K-means fit in sine space (1-D or 2-D points).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centers: Vec<Vec<f64>>,
    /// Within-cluster sum of squares for the final assignment.
    pub inertia: f64,
    /// Inertia after each assignment step, in order.
    pub history: Vec<f64>,
    /// Final group of every fitted point.
    pub assignments: Vec<usize>,
}

impl ClusterModel {
    pub fn g(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLabel {
    pub group: usize,
    pub features: Vec<f64>,
}

impl ClusterLabel {
    pub fn onehot(&self, g: usize) -> Vec<f64> {
        let mut v = vec![0.0; g];
        v[self.group] = 1.0;
        v
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center, ties to the lower index.
fn nearest(centers: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = dist2(c, p);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut sorted: Vec<&Vec<f64>> = points.iter().collect();
    sorted.sort_by(|a, b| lex(a, b));
    sorted.dedup();
    sorted.len()
}

fn lex(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

fn check_points(points: &[Vec<f64>]) -> Result<usize, LabelError> {
    let dim = points
        .first()
        .map(Vec::len)
        .ok_or(LabelError::TooFewDistinct { g: 1, distinct: 0 })?;
    if dim == 0 || dim > 2 {
        return Err(LabelError::Dimension { expected: 2, got: dim });
    }
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(LabelError::Dimension {
            expected: dim,
            got: p.len(),
        });
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(LabelError::NonFinite);
    }
    Ok(dim)
}

/// K-means with farthest-point seeding. The first seed is drawn from `rng`.
/// Centers come back sorted (ascending / lexicographic) and the group
/// numbering follows that order.
pub fn kmeans<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    g: usize,
    rng: &mut R,
    max_iters: usize,
) -> Result<ClusterModel, LabelError> {
    if g == 0 {
        return Err(LabelError::ZeroGroups);
    }
    check_points(points)?;
    let distinct = distinct_count(points);
    if distinct < g {
        return Err(LabelError::TooFewDistinct { g, distinct });
    }

    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut min_d: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < g {
        let mut far = 0;
        for (i, d) in min_d.iter().enumerate() {
            if *d > min_d[far] {
                far = i;
            }
        }
        let c = points[far].clone();
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centers.push(c);
    }

    let dim = centers[0].len();
    let mut history = Vec::new();
    let mut assignments: Vec<usize> = Vec::new();
    for _ in 0..max_iters.max(1) {
        let (next, inertia) = assign_all(&centers, points);
        history.push(inertia);
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; g];
        let mut counts = vec![0usize; g];
        for (p, &k) in points.iter().zip(&assignments) {
            counts[k] += 1;
            for (s, x) in sums[k].iter_mut().zip(p) {
                *s += x;
            }
        }
        for k in 0..g {
            if counts[k] > 0 {
                centers[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
    }

    centers.sort_by(|a, b| lex(a, b));
    let (assignments, inertia) = assign_all(&centers, points);
    if history.last().is_none_or(|&h| inertia < h) {
        history.push(inertia);
    }
    Ok(ClusterModel {
        centers,
        inertia,
        history,
        assignments,
    })
}

fn assign_all(centers: &[Vec<f64>], points: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let groups = points
        .iter()
        .map(|p| {
            let (k, d) = nearest(centers, p);
            total += d;
            k
        })
        .collect();
    (groups, total)
}

/// Picks the candidate at the largest second difference of inertia. Only
/// interior candidates have a second difference; ties go to the smaller `g`.
pub fn elbow_select_g<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    candidates: &[usize],
    rng: &mut R,
) -> Result<usize, LabelError> {
    if candidates.len() < 3 || candidates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LabelError::Candidates(candidates.to_vec()));
    }
    let inertia = candidates
        .iter()
        .map(|&g| kmeans(points, g, rng, 100).map(|m| m.inertia))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = (candidates[1], f64::NEG_INFINITY);
    for k in 1..candidates.len() - 1 {
        let d2 = inertia[k - 1] - 2.0 * inertia[k] + inertia[k + 1];
        if d2 > best.1 {
            best = (candidates[k], d2);
        }
    }
    Ok(best.0)
}

/// Nearest center of `model`; equidistant points go to the lower group.
pub fn assign_cluster(model: &ClusterModel, features: &[f64]) -> Result<ClusterLabel, LabelError> {
    if features.len() != model.dim() {
        return Err(LabelError::Dimension {
            expected: model.dim(),
            got: features.len(),
        });
    }
    Ok(ClusterLabel {
        group: nearest(&model.centers, features).0,
        features: features.to_vec(),
    })
}
