use crate::error::{contract_err, shape_err, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Scales every row of a `[N×D]` tensor to unit L2 norm. All-zero rows stay zero.
pub fn normalize_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d).take(n) {
        let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        if norm > T::zero() {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(out)
}

/// Weighted centroid `Σ w_i f_i / Σ w_i` of the rows of `features` (`[N×D]`).
///
/// Returns `None` when the weights sum to zero: the batch holds no evidence
/// for the class and the caller should skip the update.
pub fn batch_prototype<T: Real>(features: &Tensor<T>, weights: &[T]) -> Result<Option<Vec<T>>> {
    let (n, d) = features.dims2()?;
    if weights.len() != n {
        return Err(shape_err!("{} weights for {n} feature rows", weights.len()));
    }
    let total = weights.iter().fold(T::zero(), |a, &w| a + w);
    if total <= T::zero() {
        return Ok(None);
    }
    let mut acc = vec![T::zero(); d];
    for (row, &w) in features.data().chunks_exact(d).zip(weights) {
        if w == T::zero() {
            continue;
        }
        let w = w / total;
        for (a, &f) in acc.iter_mut().zip(row) {
            *a += w * f;
        }
    }
    Ok(Some(acc))
}

/// Per-class feature centroids tracked with an exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T: Real = f64> {
    /// `[classes × dim]`
    pub eta: Tensor<T>,
    /// Number of EMA updates applied to each class.
    pub updates: Vec<u64>,
    /// EMA momentum λ in `η ← λη + (1−λ)η'`.
    pub momentum: T,
    initialized: bool,
    init_sum: Vec<T>,
    init_weight: Vec<T>,
}

impl<T: Real> PrototypeBank<T> {
    /// Zero prototypes, not yet initialized.
    pub fn new(classes: usize, dim: usize, momentum: T) -> Self {
        Self {
            eta: Tensor::zeros(&[classes, dim]),
            updates: vec![0; classes],
            momentum,
            initialized: false,
            init_sum: vec![T::zero(); classes * dim],
            init_weight: vec![T::zero(); classes],
        }
    }

    /// Restores a bank from saved prototypes.
    pub fn from_parts(eta: Tensor<T>, updates: Vec<u64>, momentum: T) -> Result<Self> {
        let (classes, dim) = eta.dims2()?;
        if updates.len() != classes {
            return Err(shape_err!("{} update counts for {classes} classes", updates.len()));
        }
        let mut bank = Self::new(classes, dim, momentum);
        bank.eta = eta;
        bank.updates = updates;
        bank.initialized = true;
        Ok(bank)
    }

    pub fn classes(&self) -> usize {
        self.eta.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.eta.shape()[1]
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn prototype(&self, c: usize) -> &[T] {
        let d = self.dim();
        &self.eta.data()[c * d..(c + 1) * d]
    }

    fn check(&self, c: usize, v: &[T]) -> Result<()> {
        if c >= self.classes() {
            return Err(contract_err!("class {c} outside {} prototypes", self.classes()));
        }
        if v.len() != self.dim() {
            return Err(shape_err!("{}-d centroid for {}-d prototypes", v.len(), self.dim()));
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(contract_err!("centroid for class {c} is not finite at {i}"));
        }
        Ok(())
    }

    /// Adds one batch's weighted features to the initialization pass.
    pub fn accumulate(&mut self, features: &Tensor<T>, c: usize, weights: &[T]) -> Result<()> {
        let d = self.dim();
        let (n, fd) = features.dims2()?;
        if fd != d || weights.len() != n {
            return Err(shape_err!(
                "accumulate: {n}x{fd} features with {} weights into {d}-d prototypes",
                weights.len()
            ));
        }
        if c >= self.classes() {
            return Err(contract_err!("class {c} outside {} prototypes", self.classes()));
        }
        let sum = &mut self.init_sum[c * d..(c + 1) * d];
        for (row, &w) in features.data().chunks_exact(d).zip(weights) {
            for (s, &f) in sum.iter_mut().zip(row) {
                *s += w * f;
            }
            self.init_weight[c] += w;
        }
        Ok(())
    }

    /// Sets every prototype to its accumulated centroid. A class without
    /// any accumulated weight is a contract error.
    pub fn finish_init(&mut self) -> Result<()> {
        let d = self.dim();
        for c in 0..self.classes() {
            let w = self.init_weight[c];
            if w <= T::zero() {
                return Err(contract_err!("prototype initialization saw no pixel of class {c}"));
            }
            let proto: Vec<T> = self.init_sum[c * d..(c + 1) * d].iter().map(|&s| s / w).collect();
            self.check(c, &proto)?;
            self.eta.data_mut()[c * d..(c + 1) * d].copy_from_slice(&proto);
        }
        self.initialized = true;
        Ok(())
    }

    /// `η^c ← λη^c + (1−λ)η'`.
    pub fn ema_update(&mut self, c: usize, centroid: &[T]) -> Result<()> {
        self.check(c, centroid)?;
        let d = self.dim();
        let lam = self.momentum;
        let one_minus = T::one() - lam;
        for (e, &v) in self.eta.data_mut()[c * d..(c + 1) * d].iter_mut().zip(centroid) {
            *e = lam * *e + one_minus * v;
        }
        self.updates[c] += 1;
        Ok(())
    }

    /// Marks the bank usable without an initialization pass (prototypes as they are).
    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    /// `softmax_c(−‖f − η̂^c‖ / temperature)` for every row of `features`,
    /// where `η̂^c` is the prototype scaled to unit norm. Returns `[N × classes]`.
    pub fn affinity(&self, features: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
        if !self.initialized {
            return Err(contract_err!("prototype bank used before its initialization pass"));
        }
        if temperature <= T::zero() {
            return Err(contract_err!("temperature must be positive, got {temperature}"));
        }
        let (n, d) = features.dims2()?;
        if d != self.dim() {
            return Err(shape_err!("{d}-d features for {}-d prototypes", self.dim()));
        }
        let k = self.classes();
        let unit = normalize_rows(&self.eta)?;
        let mut out = vec![T::zero(); n * k];
        for (row, dst) in features.data().chunks_exact(d).zip(out.chunks_exact_mut(k)) {
            for (c, o) in dst.iter_mut().enumerate() {
                let p = &unit.data()[c * d..(c + 1) * d];
                let dist = row
                    .iter()
                    .zip(p)
                    .fold(T::zero(), |a, (&x, &y)| a + (x - y) * (x - y))
                    .sqrt();
                *o = -dist / temperature;
            }
            let m = dst.iter().copied().fold(T::neg_infinity(), T::max);
            dst.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s = dst.iter().fold(T::zero(), |a, &v| a + v);
            dst.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new(&[n, k], out)
    }
}

/// Centroid weights for class `c` from `[C×h×w]` probabilities: the class-`c`
/// probability on pixels whose top class is `c`, zero elsewhere.
pub fn pseudo_class_weights<T: Real>(probs: &Tensor<T>, c: usize) -> Result<Vec<T>> {
    let (k, h, w) = probs.dims3()?;
    if c >= k {
        return Err(contract_err!("class {c} outside {k} classes"));
    }
    let n = h * w;
    let d = probs.data();
    Ok((0..n)
        .map(|i| {
            let pc = d[c * n + i];
            let top = (0..k).all(|j| j == c || d[j * n + i] < pc || (d[j * n + i] == pc && j > c));
            if top {
                pc
            } else {
                T::zero()
            }
        })
        .collect())
}
