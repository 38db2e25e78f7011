use super::{GradVector, ParamStore, Real};

/// Central-difference gradient `(f(θ+e) − f(θ−e)) / 2·eps` for every
/// coordinate. Slow; meant as a test oracle.
pub fn finite_diff_grad<T: Real>(
    f: impl Fn(&ParamStore<T>) -> f64,
    params: &ParamStore<T>,
    eps: f64,
) -> GradVector<T> {
    let coords: Vec<usize> = (0..params.numel()).collect();
    let partial = finite_diff_coords(f, params, eps, &coords);
    GradVector::new(partial.into_iter().map(T::of).collect())
}

/// Central differences at the listed flat coordinates only.
pub fn finite_diff_coords<T: Real>(
    f: impl Fn(&ParamStore<T>) -> f64,
    params: &ParamStore<T>,
    eps: f64,
    coords: &[usize],
) -> Vec<f64> {
    assert!(eps > 0.0, "eps must be positive");
    let mut work = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &flat in coords {
        let (ti, off) = locate(params, flat);
        let orig = work.tensor(ti).values()[off];
        work.tensor_mut(ti).values_mut()[off] = T::of(orig.f64() + eps);
        let up = f(&work);
        work.tensor_mut(ti).values_mut()[off] = T::of(orig.f64() - eps);
        let down = f(&work);
        work.tensor_mut(ti).values_mut()[off] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    out
}

fn locate<T: Real>(params: &ParamStore<T>, flat: usize) -> (usize, usize) {
    for i in 0..params.num_tensors() {
        let start = params.offset(i);
        if flat < start + params.tensor(i).len() {
            return (i, flat - start);
        }
    }
    panic!("flat coordinate {flat} out of range");
}
