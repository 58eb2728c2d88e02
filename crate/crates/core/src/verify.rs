//! Double-precision finite-difference suite over every differentiable
//! primitive and every loss composition through small networks.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{discriminator_loss, generator_loss, LossConfig, PerceptualVariant};
use crate::models::{ArchConfig, Discriminator, FeatureNet, FeatureNetConfig, Generator, Mode};
use crate::rng::rng_from;
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::{Activation, BnMode, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

type CheckFn = Box<dyn Fn(f64, f64) -> Result<GradCheckReport>>;

struct Case {
    name: String,
    run: CheckFn,
}

/// Uniform values in `[-1, 1]`, pushed at least `margin` away from zero so
/// that kinks are never straddled by a finite-difference probe.
fn rand_t(shape: &[usize], seed: u64, margin: f64) -> Tensor<f64> {
    let mut rng = rng_from(seed, &[0x7663]);
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v.abs() < margin {
            margin.copysign(v) + v
        } else {
            v
        }
    })
}

/// Scalar `Σ (v + r)²` with a fixed random `r`, so every output element
/// contributes with a distinct weight.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let r = rand_t(tape.shape(v), seed ^ 0xABCD, 0.0);
    let r = tape.constant(r);
    let s = tape.add(v, r)?;
    tape.sq_l2(s)
}

fn case(name: &str, x: Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static) -> Case {
    Case {
        name: name.to_string(),
        run: Box::new(move |eps, tol| grad_check(&f, &x, eps, tol)),
    }
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        image_side: 16,
        d_z: 3,
        d_h: 7,
        d_proj: 2,
        g_channels: 2,
        d_channels: 2,
        ..ArchConfig::default()
    }
}

fn param_index(names: &[String], name: &str) -> usize {
    names.iter().position(|n| n == name).expect("known parameter")
}

fn primitive_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    let x = rand_t(&[2, 2, 5, 5], 1, 0.0);
    let w = rand_t(&[3, 2, 3, 3], 2, 0.0);
    let b = rand_t(&[3], 3, 0.0);
    for (stride, pad) in [(1, 0), (2, 1)] {
        let tag = format!("s{stride}p{pad}");
        let (wc, bc) = (w.clone(), b.clone());
        cases.push(case(&format!("conv2d/x_{tag}"), x.clone(), move |t, v| {
            let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone()));
            let y = t.conv2d(v, w, Some(b), stride, pad)?;
            project(t, y, 10)
        }));
        let (xc, bc) = (x.clone(), b.clone());
        cases.push(case(&format!("conv2d/w_{tag}"), w.clone(), move |t, v| {
            let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
            let y = t.conv2d(x, v, Some(b), stride, pad)?;
            project(t, y, 11)
        }));
        let (xc, wc) = (x.clone(), w.clone());
        cases.push(case(&format!("conv2d/b_{tag}"), b.clone(), move |t, v| {
            let (x, w) = (t.constant(xc.clone()), t.constant(wc.clone()));
            let y = t.conv2d(x, w, Some(v), stride, pad)?;
            project(t, y, 12)
        }));
    }

    let xt = rand_t(&[2, 3, 3, 3], 4, 0.0);
    let wt = rand_t(&[3, 2, 4, 4], 5, 0.0);
    let bt = rand_t(&[2], 6, 0.0);
    {
        let (wc, bc) = (wt.clone(), bt.clone());
        cases.push(case("conv_transpose2d/x", xt.clone(), move |t, v| {
            let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone()));
            let y = t.conv_transpose2d(v, w, Some(b), 2, 1)?;
            project(t, y, 13)
        }));
        let (xc, bc) = (xt.clone(), bt.clone());
        cases.push(case("conv_transpose2d/w", wt.clone(), move |t, v| {
            let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
            let y = t.conv_transpose2d(x, v, Some(b), 2, 1)?;
            project(t, y, 14)
        }));
        let (xc, wc) = (xt.clone(), wt.clone());
        cases.push(case("conv_transpose2d/b", bt.clone(), move |t, v| {
            let (x, w) = (t.constant(xc.clone()), t.constant(wc.clone()));
            let y = t.conv_transpose2d(x, w, Some(v), 2, 1)?;
            project(t, y, 15)
        }));
    }

    let xb = rand_t(&[3, 2, 2, 2], 7, 0.0);
    let gamma = rand_t(&[2], 8, 0.3);
    let beta = rand_t(&[2], 9, 0.0);
    let running_mean = vec![0.1, -0.2];
    let running_var = vec![0.8, 1.3];
    {
        let (g, be) = (gamma.clone(), beta.clone());
        cases.push(case("batchnorm/x_train", xb.clone(), move |t, v| {
            let (g, b) = (t.constant(g.clone()), t.constant(be.clone()));
            let (y, _) = t.batchnorm(v, g, b, 1e-5, BnMode::Train)?;
            project(t, y, 16)
        }));
        let (xc, be) = (xb.clone(), beta.clone());
        cases.push(case("batchnorm/gamma_train", gamma.clone(), move |t, v| {
            let (x, b) = (t.constant(xc.clone()), t.constant(be.clone()));
            let (y, _) = t.batchnorm(x, v, b, 1e-5, BnMode::Train)?;
            project(t, y, 17)
        }));
        let (xc, g) = (xb.clone(), gamma.clone());
        cases.push(case("batchnorm/beta_train", beta.clone(), move |t, v| {
            let (x, g) = (t.constant(xc.clone()), t.constant(g.clone()));
            let (y, _) = t.batchnorm(x, g, v, 1e-5, BnMode::Train)?;
            project(t, y, 18)
        }));
        let (g, be) = (gamma.clone(), beta.clone());
        let (rm, rv) = (running_mean.clone(), running_var.clone());
        cases.push(case("batchnorm/x_eval", xb.clone(), move |t, v| {
            let (g, b) = (t.constant(g.clone()), t.constant(be.clone()));
            let (y, _) = t.batchnorm(v, g, b, 1e-5, BnMode::Eval { mean: &rm, var: &rv })?;
            project(t, y, 19)
        }));
        let (g, be) = (gamma.clone(), beta.clone());
        cases.push(case("batchnorm/x_mean_output", xb.clone(), move |t, v| {
            let (g, b) = (t.constant(g.clone()), t.constant(be.clone()));
            let (y, _) = t.batchnorm(v, g, b, 1e-5, BnMode::Train)?;
            t.mean(y)
        }));
    }

    let xl = rand_t(&[3, 4], 20, 0.0);
    let wl = rand_t(&[4, 2], 21, 0.0);
    let bl = rand_t(&[2], 22, 0.0);
    {
        let (wc, bc) = (wl.clone(), bl.clone());
        cases.push(case("linear/x", xl.clone(), move |t, v| {
            let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone()));
            let y = t.linear(v, w, b)?;
            project(t, y, 23)
        }));
        let (xc, bc) = (xl.clone(), bl.clone());
        cases.push(case("linear/w", wl.clone(), move |t, v| {
            let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
            let y = t.linear(x, v, b)?;
            project(t, y, 24)
        }));
        let (xc, wc) = (xl.clone(), wl.clone());
        cases.push(case("linear/b", bl.clone(), move |t, v| {
            let (x, w) = (t.constant(xc.clone()), t.constant(wc.clone()));
            let y = t.linear(x, w, v)?;
            project(t, y, 25)
        }));
    }

    for (name, kind) in [
        ("relu", Activation::Relu),
        ("leaky_relu", Activation::LeakyRelu(0.2)),
        ("tanh", Activation::Tanh),
        ("sigmoid", Activation::Sigmoid),
    ] {
        cases.push(case(name, rand_t(&[2, 3, 2], 30, 0.05), move |t, v| {
            let y = t.activation(v, kind)?;
            project(t, y, 31)
        }));
    }

    let other = rand_t(&[2, 3], 32, 0.0);
    {
        let o = other.clone();
        cases.push(case("concat/axis0", rand_t(&[1, 3], 33, 0.0), move |t, v| {
            let b = t.constant(o.clone());
            let y = t.concat(v, b, 0)?;
            project(t, y, 34)
        }));
        let o = rand_t(&[2, 4, 2, 2], 35, 0.0);
        cases.push(case("concat/axis1", rand_t(&[2, 3, 2, 2], 36, 0.0), move |t, v| {
            let b = t.constant(o.clone());
            let y = t.concat(b, v, 1)?;
            project(t, y, 37)
        }));
        let o = other.clone();
        cases.push(case("add", rand_t(&[2, 3], 38, 0.0), move |t, v| {
            let b = t.constant(o.clone());
            let y = t.add(v, b)?;
            project(t, y, 39)
        }));
        let o = other.clone();
        cases.push(case("sub", rand_t(&[2, 3], 40, 0.0), move |t, v| {
            let b = t.constant(o.clone());
            let y = t.sub(b, v)?;
            project(t, y, 41)
        }));
    }
    cases.push(case("affine", rand_t(&[5], 42, 0.0), |t, v| {
        let y = t.affine(v, -1.7, 0.3)?;
        project(t, y, 43)
    }));
    cases.push(case("sum", rand_t(&[2, 3, 2], 44, 0.0), |t, v| t.sum(v)));
    cases.push(case("mean", rand_t(&[2, 3, 2], 45, 0.0), |t, v| {
        let m = t.mean(v)?;
        t.sq_l2(m)
    }));
    cases.push(case("sq_l2", rand_t(&[2, 3, 2], 46, 0.0), |t, v| t.sq_l2(v)));
    cases.push(case("log", rand_t(&[6], 47, 0.0), |t, v| {
        let p = t.affine(v, 0.4, 1.0)?;
        let y = t.log(p)?;
        project(t, y, 48)
    }));
    cases.push(case("clamp", rand_t(&[8], 49, 0.05), |t, v| {
        let y = t.clamp(v, -0.5, 0.5)?;
        project(t, y, 50)
    }));
    cases.push(case("gram", rand_t(&[2, 3, 2, 3], 51, 0.0), |t, v| {
        let y = t.gram(v)?;
        project(t, y, 52)
    }));
    cases.push(case("reshape", rand_t(&[2, 6], 53, 0.0), |t, v| {
        let y = t.reshape(v, &[3, 4])?;
        project(t, y, 54)
    }));
    cases.push(case("tile_spatial", rand_t(&[2, 3], 55, 0.0), |t, v| {
        let y = t.tile_spatial(v, 2, 3)?;
        project(t, y, 56)
    }));
    cases.push(case("cross_entropy", rand_t(&[3, 4], 57, 0.0), |t, v| t.cross_entropy(v, &[0, 3, 1])));
    {
        let w = rand_t(&[2, 2, 2, 2], 58, 0.0);
        cases.push(case("conv2d_relu_mean", rand_t(&[1, 2, 4, 4], 59, 0.2), move |t, v| {
            let w = t.constant(w.clone());
            let y = t.conv2d(v, w, None, 2, 0)?;
            let y = t.affine(y, 1.0, 0.05)?;
            let y = t.relu(y)?;
            t.mean(y)
        }));
    }
    cases
}

/// Fixed inputs for the network-level checks.
struct NetFixture {
    g: Generator<f64>,
    d: Discriminator<f64>,
    fnet: FeatureNet<f64>,
    x: Tensor<f64>,
    z: Tensor<f64>,
    h: Tensor<f64>,
    h_wrong: Tensor<f64>,
}

impl NetFixture {
    fn new() -> Result<Self> {
        let arch = tiny_arch();
        let n = 3;
        let s = arch.image_side;
        // Real images close to G's initial output keep ‖x - x̂‖² of order one.
        let x = rand_t(&[n, 3, s, s], 104, 0.0);
        let x = Tensor::from_fn(x.shape(), |i| 0.1 * x.data()[i]);
        Ok(NetFixture {
            g: Generator::init(&arch, 101)?,
            d: Discriminator::init(&arch, 102)?,
            fnet: FeatureNet::init(&FeatureNetConfig {
                channels: vec![2, 3],
                tap: 2,
                seed: 103,
            })?,
            x,
            z: rand_t(&[n, arch.d_z], 105, 0.0),
            h: rand_t(&[n, arch.d_h], 106, 0.0),
            h_wrong: rand_t(&[n, arch.d_h], 107, 0.0),
        })
    }
}

fn loss_cases() -> Result<Vec<Case>> {
    let fx = std::rc::Rc::new(NetFixture::new()?);
    let mut cases = Vec::new();

    let d_loss = |fx: &NetFixture, t: &mut Tape<f64>, x: Var, d_param: Option<(usize, Var)>| -> Result<Var> {
        let gb = fx.g.bind(t, false);
        let db = fx.d.bind(t, false);
        let db = match d_param {
            Some((i, v)) => db.replaced(i, v),
            None => db,
        };
        let z = t.constant(fx.z.clone());
        let h = t.constant(fx.h.clone());
        let hw = t.constant(fx.h_wrong.clone());
        let fake = fx.g.forward(t, &gb, z, h, Mode::Train)?.out;
        let rr = fx.d.forward(t, &db, x, h, Mode::Train)?.out;
        let rw = fx.d.forward(t, &db, x, hw, Mode::Train)?.out;
        let fr = fx.d.forward(t, &db, fake, h, Mode::Train)?.out;
        discriminator_loss(t, rr, rw, fr, 1e-7)
    };
    {
        let f = fx.clone();
        cases.push(case("discriminator_loss/x", fx.x.clone(), move |t, v| d_loss(&f, t, v, None)));
        let f = fx.clone();
        let i = param_index(fx.d.params().names(), "proj.w");
        let w = fx.d.params().tensors()[i].clone();
        cases.push(case("discriminator_loss/d_proj_w", w, move |t, v| {
            let x = t.constant(f.x.clone());
            d_loss(&f, t, x, Some((i, v)))
        }));
        let f = fx.clone();
        let i = param_index(fx.d.params().names(), "down1.gamma");
        let w = fx.d.params().tensors()[i].clone();
        cases.push(case("discriminator_loss/d_down1_gamma", w, move |t, v| {
            let x = t.constant(f.x.clone());
            d_loss(&f, t, x, Some((i, v)))
        }));
    }

    // Generator objective with z or one G parameter as the variable; λ = 1
    // keeps the perceptual term visible next to the contextual one.
    let g_loss = |fx: &NetFixture, t: &mut Tape<f64>, variant: PerceptualVariant, z: Var, g_param: Option<(usize, Var)>| -> Result<Var> {
        let gb = fx.g.bind(t, false);
        let gb = match g_param {
            Some((i, v)) => gb.replaced(i, v),
            None => gb,
        };
        let db = fx.d.bind(t, false);
        let h = t.constant(fx.h.clone());
        let x = t.constant(fx.x.clone());
        let fake = fx.g.forward(t, &gb, z, h, Mode::Train)?.out;
        let fr = fx.d.forward(t, &db, fake, h, Mode::Train)?.out;
        let cfg = LossConfig {
            lambda: 1.0,
            feature_layer: 2,
            ..LossConfig::with_variant(variant)
        };
        Ok(generator_loss(t, &cfg, fr, x, fake, &fx.fnet)?.total)
    };
    for variant in PerceptualVariant::ALL {
        let flag = variant.flag();
        let f = fx.clone();
        cases.push(case(&format!("generator_loss_{flag}/z"), fx.z.clone(), move |t, v| g_loss(&f, t, variant, v, None)));
        let f = fx.clone();
        let i = param_index(fx.g.params().names(), "up0.w");
        let w = fx.g.params().tensors()[i].clone();
        cases.push(case(&format!("generator_loss_{flag}/g_up0_w"), w, move |t, v| {
            let z = t.constant(f.z.clone());
            g_loss(&f, t, variant, z, Some((i, v)))
        }));
    }
    let f = fx.clone();
    let i = param_index(fx.g.params().names(), "proj.w");
    let w = fx.g.params().tensors()[i].clone();
    cases.push(case("contextual_loss/g_proj_w", w, move |t, v| {
        let z = t.constant(f.z.clone());
        g_loss(&f, t, PerceptualVariant::None, z, Some((i, v)))
    }));
    Ok(cases)
}

/// A square op whose backward rule is deliberately off by a factor of two.
fn faulty_case() -> Case {
    case("fault/square_wrong_backward", rand_t(&[4], 60, 0.1), |t, v| {
        let val = t.value(v).clone();
        let sq = Tensor::from_fn(val.shape(), |i| val.data()[i] * val.data()[i]);
        let y = t.custom(&[v], sq, |inputs, _, g| {
            vec![inputs[0].data().iter().zip(g).map(|(x, g)| x * g).collect()]
        })?;
        t.sum(y)
    })
}

fn group(name: &str) -> &str {
    name.split('/').next().unwrap_or(name)
}

fn all_cases(inject_fault: bool) -> Result<Vec<Case>> {
    let mut cases = primitive_cases();
    cases.extend(loss_cases()?);
    if inject_fault {
        cases.push(faulty_case());
    }
    Ok(cases)
}

/// Names of every check in the default suite.
pub fn check_names() -> Result<Vec<String>> {
    Ok(all_cases(false)?.into_iter().map(|c| c.name).collect())
}

/// Runs every check whose name or group (the part before `/`) equals
/// `filter`, or all of them without a filter. `inject_fault` adds a check
/// with a wrong backward rule, which must be reported as failing.
pub fn run_checks(filter: Option<&str>, inject_fault: bool, eps: f64, tol: f64) -> Result<Vec<CheckOutcome>> {
    let cases: Vec<Case> = all_cases(inject_fault)?
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name == f || group(&c.name) == f) || c.name.starts_with("fault/"))
        .collect();
    if cases.iter().all(|c| c.name.starts_with("fault/")) {
        let mut groups: Vec<String> = all_cases(false)?.iter().map(|c| group(&c.name).to_string()).collect();
        groups.dedup();
        return Err(Error::Config(format!(
            "no gradient check matches {:?}; known ops: {}",
            filter.unwrap_or(""),
            groups.join(", ")
        )));
    }
    cases
        .iter()
        .map(|c| {
            let r = (c.run)(eps, tol)?;
            Ok(CheckOutcome {
                name: c.name.clone(),
                elements: r.analytic.len(),
                max_rel_error: r.max_rel_error,
                tol,
                passed: r.passed(),
            })
        })
        .collect()
}
