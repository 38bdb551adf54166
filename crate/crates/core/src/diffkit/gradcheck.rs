use super::{Bound, DiffError, ParamId, ParamStore, Tape, Tensor, Var};

/// Relative error with a small absolute floor so that components whose true
/// gradient is ~0 do not amplify round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of scalar `f` at `x` to central differences
/// with step `h`; returns the worst componentwise relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, DiffError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, DiffError>,
{
    finite_diff_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h)
}

/// Multi-input variant of [`finite_diff_check`].
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64, DiffError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, DiffError>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64, DiffError> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        scalar_of(out)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    scalar_of(out)?;
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.tensor(*v)).collect();

    let mut worst = 0.0_f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (which, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            probe[which].data_mut()[i] = orig + h;
            let fp = eval(&probe)?;
            probe[which].data_mut()[i] = orig - h;
            let fm = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic[which].data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Parameter-gradient variant: perturbs entries of the listed parameters in
/// `store` and re-runs `f` on a fresh tape each time. At most `per_param`
/// evenly spaced entries of each parameter are probed.
pub fn finite_diff_check_params<F>(store: &mut ParamStore, ids: &[ParamId], per_param: usize, h: f64, f: F) -> Result<f64, DiffError>
where
    F: for<'s, 't> Fn(&Bound<'s, 't>) -> Result<Var<'t>, DiffError>,
{
    let analytic = {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let out = f(&bound)?;
        scalar_of(out)?;
        bound.gradients(&tape.backward(out))
    };
    let eval = |store: &ParamStore| -> Result<f64, DiffError> {
        let tape = Tape::new();
        let out = f(&store.bind(&tape))?;
        scalar_of(out)
    };
    let mut worst = 0.0_f64;
    for &id in ids {
        let n = store.get(id).numel();
        let step = n.div_ceil(per_param.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let fp = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let fm = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[id.0].data()[i], (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst)
}

fn scalar_of(v: Var<'_>) -> Result<f64, DiffError> {
    let t = v.value();
    if t.numel() != 1 {
        return Err(DiffError::Shape {
            op: "finite_diff_check",
            detail: format!("objective must be scalar, got {:?}", t.shape()),
        });
    }
    Ok(t.item())
}
