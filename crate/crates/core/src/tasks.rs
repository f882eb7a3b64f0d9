//! Finite-sum objectives `F(w) = (1/n) sum_i f(w; z_i)` with analytic
//! gradients, and their partition across workers.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveKind<T> {
    /// `f(w; z) = 0.5 ||w - z||^2`.
    Quadratic { targets: Vec<Vec<T>> },
    /// Binary logistic loss with labels in `{0, 1}` plus `0.5 * l2 * ||w||^2`.
    Logistic {
        features: Vec<Vec<T>>,
        labels: Vec<T>,
        l2: T,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective<T> {
    kind: ObjectiveKind<T>,
    n: usize,
    d: usize,
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl<T: Scalar> Objective<T> {
    pub fn from_kind(kind: ObjectiveKind<T>) -> Result<Self> {
        let rows = match &kind {
            ObjectiveKind::Quadratic { targets } => targets,
            ObjectiveKind::Logistic {
                features,
                labels,
                l2,
            } => {
                if labels.len() != features.len() {
                    return Err(Error::InvalidInput(format!(
                        "{} labels for {} feature rows",
                        labels.len(),
                        features.len()
                    )));
                }
                if !(l2.is_finite() && *l2 >= T::zero()) {
                    return Err(Error::InvalidParameter("l2 must be finite and >= 0".into()));
                }
                if labels.iter().any(|&y| y != T::zero() && y != T::one()) {
                    return Err(Error::InvalidInput("labels must be 0 or 1".into()));
                }
                features
            }
        };
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidInput("objective needs at least one instance".into()));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        for r in rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput("instance data must be finite".into()));
            }
        }
        Ok(Self { kind, n, d })
    }

    pub fn kind(&self) -> &ObjectiveKind<T> {
        &self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Writes `grad f(w; z_i)` into `out`.
    pub fn instance_gradient_into(&self, w: &[T], i: usize, out: &mut [T]) {
        debug_assert_eq!(w.len(), self.d);
        match &self.kind {
            ObjectiveKind::Quadratic { targets } => {
                for ((o, &wj), &zj) in out.iter_mut().zip(w).zip(&targets[i]) {
                    *o = wj - zj;
                }
            }
            ObjectiveKind::Logistic {
                features,
                labels,
                l2,
            } => {
                let x = &features[i];
                let residual = sigmoid(dot(w, x)) - labels[i];
                for ((o, &wj), &xj) in out.iter_mut().zip(w).zip(x) {
                    *o = residual * xj + *l2 * wj;
                }
            }
        }
    }

    pub fn instance_gradient(&self, w: &[T], i: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.d];
        self.instance_gradient_into(w, i, &mut out);
        out
    }

    pub fn instance_loss(&self, w: &[T], i: usize) -> T {
        let half = T::of(0.5);
        match &self.kind {
            ObjectiveKind::Quadratic { targets } => {
                half * w
                    .iter()
                    .zip(&targets[i])
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<T>()
            }
            ObjectiveKind::Logistic {
                features,
                labels,
                l2,
            } => {
                let z = dot(w, &features[i]);
                softplus(z) - labels[i] * z + half * *l2 * dot(w, w)
            }
        }
    }

    /// Exact `grad F(w)` averaged over all instances.
    pub fn full_gradient(&self, w: &[T]) -> Result<Vec<T>> {
        self.check_dim(w)?;
        let mut acc = vec![T::zero(); self.d];
        let mut g = vec![T::zero(); self.d];
        for i in 0..self.n {
            self.instance_gradient_into(w, i, &mut g);
            acc.iter_mut().zip(&g).for_each(|(a, &x)| *a += x);
        }
        let n = T::of(self.n as f64);
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    pub fn full_loss(&self, w: &[T]) -> Result<T> {
        self.check_dim(w)?;
        let total: T = (0..self.n).map(|i| self.instance_loss(w, i)).sum();
        Ok(total / T::of(self.n as f64))
    }

    /// Smoothness constant `L` of `F`: exactly 1 for the quadratic, the
    /// standard upper estimate `max ||x||^2 / 4 + l2` for logistic loss.
    pub fn smoothness(&self) -> f64 {
        match &self.kind {
            ObjectiveKind::Quadratic { .. } => 1.0,
            ObjectiveKind::Logistic { features, l2, .. } => {
                let max_sq = features
                    .iter()
                    .map(|x| dot(x, x).to_f64_lossy())
                    .fold(0.0, f64::max);
                0.25 * max_sq + l2.to_f64_lossy()
            }
        }
    }

    /// Closed-form minimizer, available for the quadratic.
    pub fn minimizer(&self) -> Option<Vec<T>> {
        match &self.kind {
            ObjectiveKind::Quadratic { targets } => {
                let n = T::of(self.n as f64);
                let mut m = vec![T::zero(); self.d];
                for z in targets {
                    m.iter_mut().zip(z).for_each(|(a, &x)| *a += x);
                }
                m.iter_mut().for_each(|a| *a /= n);
                Some(m)
            }
            ObjectiveKind::Logistic { .. } => None,
        }
    }

    /// Fraction of instances classified correctly by `w` (logistic only).
    pub fn accuracy(&self, w: &[T]) -> Option<f64> {
        match &self.kind {
            ObjectiveKind::Logistic {
                features, labels, ..
            } => {
                let correct = features
                    .iter()
                    .zip(labels)
                    .filter(|(x, &y)| (dot(w, x) > T::zero()) == (y == T::one()))
                    .count();
                Some(correct as f64 / self.n as f64)
            }
            ObjectiveKind::Quadratic { .. } => None,
        }
    }

    fn check_dim(&self, w: &[T]) -> Result<()> {
        if w.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: w.len(),
            });
        }
        Ok(())
    }

    /// Dumps the instances as CSV, one per row. Logistic rows start with the
    /// label column `y`; quadratic rows hold the target coordinates only.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let coords = (0..self.d).map(|j| format!("x{j}"));
        match &self.kind {
            ObjectiveKind::Quadratic { targets } => {
                out.write_record((0..self.d).map(|j| format!("z{j}")))?;
                for z in targets {
                    out.write_record(z.iter().map(|x| x.to_string()))?;
                }
            }
            ObjectiveKind::Logistic {
                features, labels, ..
            } => {
                out.write_record(std::iter::once("y".to_string()).chain(coords))?;
                for (x, y) in features.iter().zip(labels) {
                    out.write_record(
                        std::iter::once(y.to_string()).chain(x.iter().map(|v| v.to_string())),
                    )?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a dump written by [`Objective::write_csv`]. `l2` applies to
    /// logistic data only.
    pub fn read_csv<R: Read>(reader: R, l2: T) -> Result<Self> {
        let mut input = csv::Reader::from_reader(reader);
        let logistic = input.headers()?.get(0) == Some("y");
        let mut rows = Vec::new();
        for record in input.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map(T::of)
                        .map_err(|_| Error::InvalidInput(format!("bad number `{f}`")))
                })
                .collect::<Result<Vec<T>>>()?;
            rows.push(row);
        }
        let kind = if logistic {
            let labels = rows.iter().map(|r| r[0]).collect();
            let features = rows.into_iter().map(|r| r[1..].to_vec()).collect();
            ObjectiveKind::Logistic {
                features,
                labels,
                l2,
            }
        } else {
            ObjectiveKind::Quadratic { targets: rows }
        };
        Self::from_kind(kind)
    }
}

fn normal_vec<T: Scalar, R: Rng>(d: usize, rng: &mut R) -> Vec<T> {
    (0..d).map(|_| T::standard_normal(rng)).collect()
}

/// Quadratic task with standard normal targets. `F` is 1-smooth with
/// minimizer `mean(z_i)`.
pub fn make_quadratic<T: Scalar>(n: usize, d: usize, seed: u64) -> Result<Objective<T>> {
    make_quadratic_heterogeneous(n, d, 1, 0.0, seed)
}

/// Quadratic task whose instances come in `groups` contiguous blocks, block
/// `k` shifted by `shift * u_k` with `u_k` standard normal. Pair with
/// [`partition_contiguous`] to give each worker a differently centred shard.
pub fn make_quadratic_heterogeneous<T: Scalar>(
    n: usize,
    d: usize,
    groups: usize,
    shift: f64,
    seed: u64,
) -> Result<Objective<T>> {
    if n == 0 || d == 0 || groups == 0 {
        return Err(Error::InvalidParameter("n, d and groups must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<Vec<T>> = (0..n).map(|_| normal_vec(d, &mut rng)).collect();
    let targets = if shift != 0.0 {
        let offsets: Vec<Vec<T>> = (0..groups).map(|_| normal_vec(d, &mut rng)).collect();
        let s = T::of(shift);
        targets
            .into_iter()
            .enumerate()
            .map(|(i, z)| {
                let off = &offsets[i * groups / n];
                z.iter().zip(off).map(|(&a, &o)| a + s * o).collect()
            })
            .collect()
    } else {
        targets
    };
    Objective::from_kind(ObjectiveKind::Quadratic { targets })
}

/// Logistic-regression data: `x ~ N(0, I)`, `P(y = 1 | x) = sigmoid(s * u.x)`
/// for a random unit direction `u` and separation `s`.
pub fn make_logistic<T: Scalar>(
    n: usize,
    d: usize,
    separation: f64,
    l2: f64,
    seed: u64,
) -> Result<Objective<T>> {
    make_logistic_with_holdout(n, 0, d, separation, l2, seed).map(|(train, _)| train)
}

/// Training objective plus an independent held-out set from the same
/// distribution (`None` when `holdout == 0`).
pub fn make_logistic_with_holdout<T: Scalar>(
    n: usize,
    holdout: usize,
    d: usize,
    separation: f64,
    l2: f64,
    seed: u64,
) -> Result<(Objective<T>, Option<Objective<T>>)> {
    if n < 2 || d == 0 {
        return Err(Error::InvalidParameter("logistic task needs n >= 2 and d >= 1".into()));
    }
    if !(l2.is_finite() && l2 >= 0.0) || !separation.is_finite() {
        return Err(Error::InvalidParameter("l2 >= 0 and finite separation required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut direction: Vec<f64> = normal_vec(d, &mut rng);
    let len = dot(&direction, &direction).sqrt();
    direction.iter_mut().for_each(|u| *u /= len);

    let mut draw = |count: usize| -> Result<Objective<T>> {
        let mut features = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let x: Vec<f64> = normal_vec(d, &mut rng);
            let p = sigmoid(separation * dot(&direction, &x));
            let y = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            features.push(x.into_iter().map(T::of).collect());
            labels.push(T::of(y));
        }
        Objective::from_kind(ObjectiveKind::Logistic {
            features,
            labels,
            l2: T::of(l2),
        })
    };
    let train = draw(n)?;
    let test = if holdout > 0 { Some(draw(holdout)?) } else { None };
    Ok((train, test))
}

/// Disjoint shards `D_1..D_m` covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(shards: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for (k, shard) in shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::Config(vec![format!("shard {k} is empty")]));
            }
            for &i in shard {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Config(vec![format!(
                        "instance {i} is out of range or assigned twice"
                    )]));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(vec![format!("instance {i} is not assigned")]));
        }
        Ok(Self { shards })
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn shard(&self, k: usize) -> &[usize] {
        &self.shards[k]
    }

    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }
}

fn split_near_equal(indices: Vec<usize>, m: usize) -> Vec<Vec<usize>> {
    let n = indices.len();
    let (base, extra) = (n / m, n % m);
    let mut it = indices.into_iter();
    (0..m)
        .map(|k| it.by_ref().take(base + usize::from(k < extra)).collect())
        .collect()
}

/// Random permutation of `0..n` split into `m` shards whose sizes differ by
/// at most one.
pub fn partition_uniform(n: usize, m: usize, seed: u64) -> Result<Partition> {
    if m == 0 || n < m {
        return Err(Error::Config(vec![format!(
            "need at least one instance per worker (n = {n}, m = {m})"
        )]));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Partition {
        shards: split_near_equal(indices, m),
    })
}

/// Contiguous blocks `0..n/m`, `n/m..2n/m`, ... without shuffling.
pub fn partition_contiguous(n: usize, m: usize) -> Result<Partition> {
    if m == 0 || n < m {
        return Err(Error::Config(vec![format!(
            "need at least one instance per worker (n = {n}, m = {m})"
        )]));
    }
    Ok(Partition {
        shards: split_near_equal((0..n).collect(), m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_optimum() {
        let obj = make_quadratic::<f64>(50, 4, 3).unwrap();
        let w_star = obj.minimizer().unwrap();
        let g = obj.full_gradient(&w_star).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));

        let same = Objective::from_kind(ObjectiveKind::Quadratic {
            targets: vec![vec![1.5, -2.0]; 5],
        })
        .unwrap();
        let z = same.minimizer().unwrap();
        assert_eq!(z, vec![1.5, -2.0]);
        assert_eq!(same.full_loss(&z).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_gap_identity() {
        let obj = make_quadratic::<f64>(200, 6, 9).unwrap();
        let w_star = obj.minimizer().unwrap();
        let f_star = obj.full_loss(&w_star).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let w: Vec<f64> = normal_vec(6, &mut rng);
            let gap = obj.full_loss(&w).unwrap() - f_star;
            let half_dist: f64 =
                0.5 * w.iter().zip(&w_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            assert!((gap - half_dist).abs() <= 1e-10 * (1.0 + half_dist));
        }
    }

    #[test]
    fn quadratic_gradient_is_w_minus_mean() {
        let obj = make_quadratic::<f64>(30, 3, 5).unwrap();
        let w = vec![0.3, -1.0, 2.0];
        let mean = obj.minimizer().unwrap();
        let g = obj.full_gradient(&w).unwrap();
        for j in 0..3 {
            assert!((g[j] - (w[j] - mean[j])).abs() < 1e-12);
        }
        let gi = obj.instance_gradient(&w, 4);
        if let ObjectiveKind::Quadratic { targets } = obj.kind() {
            for j in 0..3 {
                assert_eq!(gi[j], w[j] - targets[4][j]);
            }
        }
    }

    #[test]
    fn logistic_zero_weight_loss() {
        let obj = make_logistic::<f64>(40, 5, 2.0, 0.0, 1).unwrap();
        let w = vec![0.0; 5];
        for i in 0..obj.n() {
            assert!((obj.instance_loss(&w, i) - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn logistic_l2_gradient_descent_converges() {
        let obj = make_logistic::<f64>(200, 4, 3.0, 0.1, 2).unwrap();
        let eta = 1.0 / obj.smoothness();
        let mut w = vec![0.0; 4];
        let mut prev = obj.full_loss(&w).unwrap();
        for _ in 0..2000 {
            let g = obj.full_gradient(&w).unwrap();
            w.iter_mut().zip(&g).for_each(|(a, &b)| *a -= eta * b);
            let loss = obj.full_loss(&w).unwrap();
            assert!(loss <= prev + 1e-12);
            prev = loss;
        }
        let g = obj.full_gradient(&w).unwrap();
        assert!(dot(&g, &g) < 1e-16);
    }

    #[test]
    fn logistic_extreme_margins_stay_finite() {
        let obj = Objective::from_kind(ObjectiveKind::Logistic {
            features: vec![vec![1.0], vec![-1.0]],
            labels: vec![1.0, 1.0],
            l2: 0.0,
        })
        .unwrap();
        let w = vec![1000.0f64];
        assert!(obj.full_loss(&w).unwrap().is_finite());
        assert!(obj.full_gradient(&w).unwrap()[0].is_finite());
        assert_eq!(obj.accuracy(&w), Some(0.5));
    }

    #[test]
    fn partition_examples() {
        let p = partition_uniform(10, 5, 0).unwrap();
        assert!(p.shards().iter().all(|s| s.len() == 2));
        let mut all: Vec<usize> = p.shards().concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(p, partition_uniform(10, 5, 0).unwrap());

        let p = partition_uniform(17, 5, 3).unwrap();
        let sizes: Vec<usize> = p.shards().iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(matches!(partition_uniform(3, 4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn partition_validation() {
        assert!(Partition::new(vec![vec![0, 1], vec![2]], 3).is_ok());
        assert!(Partition::new(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(Partition::new(vec![vec![0], vec![]], 1).is_err());
        assert!(Partition::new(vec![vec![0]], 2).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let obj = make_logistic::<f64>(8, 3, 1.0, 0.25, 4).unwrap();
        let mut buf = Vec::new();
        obj.write_csv(&mut buf).unwrap();
        let back = Objective::<f64>::read_csv(buf.as_slice(), 0.25).unwrap();
        assert_eq!(back, obj);

        let obj = make_quadratic::<f64>(5, 2, 4).unwrap();
        let mut buf = Vec::new();
        obj.write_csv(&mut buf).unwrap();
        assert_eq!(Objective::<f64>::read_csv(buf.as_slice(), 0.0).unwrap(), obj);
    }

    #[test]
    fn heterogeneous_blocks_shift_shard_means() {
        let obj = make_quadratic_heterogeneous::<f64>(100, 2, 4, 5.0, 1).unwrap();
        let p = partition_contiguous(100, 4).unwrap();
        if let ObjectiveKind::Quadratic { targets } = obj.kind() {
            let means: Vec<f64> = p
                .shards()
                .iter()
                .map(|s| s.iter().map(|&i| targets[i][0]).sum::<f64>() / s.len() as f64)
                .collect();
            let spread = means.iter().cloned().fold(f64::MIN, f64::max)
                - means.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread > 1.0);
        }
    }
}
