//! Finite-difference checks of parameter gradients through model code.

use std::collections::BTreeMap;

use vpr_tensor::gradcheck::rel_err;
use vpr_tensor::{DType, Var};

use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};

fn scalar(ctx: &Ctx<'_>, v: Var) -> Result<f64> {
    let t = ctx.tape.value(v);
    if t.len() != 1 {
        return Err(Error::Dimension(format!("loss has {} elements", t.len())));
    }
    Ok(t.data()[0])
}

/// Largest relative error between the taped and central-difference
/// gradients for each named parameter, on an f64 tape.
pub fn check_param_grads<F>(store: &ParamStore, names: &[&str], h: f64, f: F) -> Result<BTreeMap<String, f64>>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, DType::F64, true);
    let loss = f(&mut ctx)?;
    scalar(&ctx, loss)?;
    let analytic = ctx.param_grads(loss)?;
    let mut work = store.clone();
    let mut out = BTreeMap::new();
    for &name in names {
        let n = store.tensor(name)?.len();
        let zeros = vec![0.0; n];
        let a = analytic.get(name).unwrap_or(&zeros);
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let x0 = store.tensor(name)?.data()[j];
            let mut eval = |x: f64| -> Result<f64> {
                work.get_mut(name).expect("known parameter").value.data_mut()[j] = x;
                let mut c = Ctx::new(&work, DType::F64, false);
                let l = f(&mut c)?;
                scalar(&c, l)
            };
            let num = (eval(x0 + h)? - eval(x0 - h)?) / (2.0 * h);
            eval(x0)?;
            worst = worst.max(rel_err(a[j], num));
        }
        out.insert(name.to_string(), worst);
    }
    Ok(out)
}
