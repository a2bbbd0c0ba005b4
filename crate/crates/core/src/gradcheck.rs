//! Central-difference gradient verification.

use crate::autograd::{Tape, Var};
use crate::error::{contract_err, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// `|a − b| / max(1, |a|, |b|)`
pub fn relative_error<T: Real>(a: T, b: T) -> T {
    (a - b).abs() / T::one().max(a.abs()).max(b.abs())
}

fn check_step<T: Real>(h: T) -> Result<()> {
    if h < T::lit(1e-7) || h > T::lit(1e-3) {
        return Err(contract_err!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        ));
    }
    Ok(())
}

/// Central-difference derivative of `eval` at each coordinate in `coords`.
///
/// `data` is perturbed in place and restored afterwards.
pub fn numeric_gradient<T: Real>(
    data: &mut [T],
    h: T,
    coords: impl IntoIterator<Item = usize>,
    mut eval: impl FnMut(&[T]) -> Result<T>,
) -> Result<Vec<(usize, T)>> {
    check_step(h)?;
    let two_h = h + h;
    let mut out = Vec::new();
    for i in coords {
        let orig = data[i];
        data[i] = orig + h;
        let plus = eval(data)?;
        data[i] = orig - h;
        let minus = eval(data)?;
        data[i] = orig;
        out.push((i, (plus - minus) / two_h));
    }
    Ok(out)
}

/// Maximum relative error between the tape gradient of scalar `f` at `x`
/// and central differences with step `h`, over every coordinate of `x`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Real,
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    check_step(h)?;
    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let y = f(leaf)?;
        y.backward()?.wrt_or_zero(leaf)
    };
    let mut data = x.data().to_vec();
    let shape = x.shape().to_vec();
    let numeric = numeric_gradient(&mut data, h, 0..x.len(), |d| {
        let tape = Tape::new();
        let v = tape.constant(Tensor::new(&shape, d.to_vec())?);
        Ok(f(v)?.value().item())
    })?;
    Ok(numeric
        .into_iter()
        .map(|(i, n)| relative_error(analytic.data()[i], n))
        .fold(T::zero(), T::max))
}

/// [`finite_diff_check`] for functions that also read (frozen) parameters.
pub fn input_gradient_check<T, F>(store: &ParamStore<T>, f: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Real,
    F: for<'t> Fn(&Binder<'t, T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    check_step(h)?;
    let analytic = {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, store);
        let leaf = tape.leaf(x.clone());
        f(&b, leaf)?.backward()?.wrt_or_zero(leaf)
    };
    let mut data = x.data().to_vec();
    let shape = x.shape().to_vec();
    let numeric = numeric_gradient(&mut data, h, 0..x.len(), |d| {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, store);
        let v = tape.constant(Tensor::new(&shape, d.to_vec())?);
        Ok(f(&b, v)?.value().item())
    })?;
    Ok(numeric
        .into_iter()
        .map(|(i, n)| relative_error(analytic.data()[i], n))
        .fold(T::zero(), T::max))
}

/// Compares tape gradients of the scalar `f` with central differences for
/// selected coordinates of selected parameters. Returns the maximum relative
/// error per parameter, in the order given.
pub fn param_gradient_check<T, F>(
    store: &ParamStore<T>,
    f: F,
    coords: &[(ParamId, Vec<usize>)],
    h: T,
) -> Result<Vec<(ParamId, T)>>
where
    T: Real,
    F: for<'t> Fn(&Binder<'t, T>) -> Result<Var<'t, T>>,
{
    check_step(h)?;
    let analytic = {
        let tape = Tape::new();
        let b = Binder::new(&tape, store);
        let grads = f(&b)?.backward()?;
        b.gradients(&grads)
    };
    let mut work = store.clone();
    let mut out = Vec::with_capacity(coords.len());
    for (id, idx) in coords {
        let mut data = work.get(*id).data().to_vec();
        let numeric = numeric_gradient(&mut data, h, idx.iter().copied(), |d| {
            work.get_mut(*id).data_mut().copy_from_slice(d);
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &work);
            Ok(f(&b)?.value().item())
        })?;
        work.get_mut(*id).data_mut().copy_from_slice(&data);
        let err = numeric
            .into_iter()
            .map(|(i, n)| relative_error(analytic[id.index()].data()[i], n))
            .fold(T::zero(), T::max);
        out.push((*id, err));
    }
    Ok(out)
}
