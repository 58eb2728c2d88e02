//! Discriminator and generator objectives as differentiable tape expressions.
//!
//! Scores entering a logarithm are clamped to `[eps, 1 - eps]`; inside that
//! interval the clamp is the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::FeatureNet;
use crate::tensor::{Real, Tape, Var};

pub const DEFAULT_LAMBDA: f64 = 1e-6;
pub const DEFAULT_LOG_CLAMP_EPS: f64 = 1e-7;

/// Which perceptual term is added to the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PerceptualVariant {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "pixel")]
    Pixel,
    #[serde(rename = "vgg", alias = "activation")]
    Activation,
    #[serde(rename = "gram")]
    Gram,
}

impl PerceptualVariant {
    pub const ALL: [PerceptualVariant; 4] = [
        PerceptualVariant::None,
        PerceptualVariant::Pixel,
        PerceptualVariant::Activation,
        PerceptualVariant::Gram,
    ];

    /// Short flag name: `none`, `pixel`, `vgg`, `gram`.
    pub fn flag(self) -> &'static str {
        match self {
            PerceptualVariant::None => "none",
            PerceptualVariant::Pixel => "pixel",
            PerceptualVariant::Activation => "vgg",
            PerceptualVariant::Gram => "gram",
        }
    }

    /// Method name used in result tables.
    pub fn method_name(self) -> &'static str {
        match self {
            PerceptualVariant::None => "GAN-INT-CLS",
            PerceptualVariant::Pixel => "GAN-INT-CLS-Pixel",
            PerceptualVariant::Activation => "GAN-INT-CLS-VGG",
            PerceptualVariant::Gram => "GAN-INT-CLS-Gram",
        }
    }
}

impl std::str::FromStr for PerceptualVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PerceptualVariant::None),
            "pixel" => Ok(PerceptualVariant::Pixel),
            "vgg" | "activation" => Ok(PerceptualVariant::Activation),
            "gram" => Ok(PerceptualVariant::Gram),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected none, pixel, vgg or gram)"
            ))),
        }
    }
}

impl std::fmt::Display for PerceptualVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.flag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub variant: PerceptualVariant,
    pub lambda: f64,
    /// 1-based feature-net block tapped by the activation and Gram losses.
    pub feature_layer: usize,
    pub log_clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: PerceptualVariant::None,
            lambda: DEFAULT_LAMBDA,
            feature_layer: 2,
            log_clamp_eps: DEFAULT_LOG_CLAMP_EPS,
        }
    }
}

impl LossConfig {
    pub fn with_variant(variant: PerceptualVariant) -> Self {
        LossConfig {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if !(self.log_clamp_eps > 0.0 && self.log_clamp_eps < 0.5) {
            return Err(Error::Config("log_clamp_eps must lie in (0, 0.5)".into()));
        }
        if self.feature_layer == 0 {
            return Err(Error::Config("feature_layer is 1-based".into()));
        }
        Ok(())
    }

    /// The perceptual term that is actually evaluated: a zero weight
    /// drops the term entirely.
    pub fn effective_variant(&self) -> PerceptualVariant {
        if self.lambda == 0.0 {
            PerceptualVariant::None
        } else {
            self.variant
        }
    }
}

fn batch_len<T: Real>(tape: &Tape<T>, op: &'static str, v: Var) -> Result<usize> {
    let s = tape.shape(v);
    if s.len() != 1 {
        return Err(Error::shape(op, "scores [m]", format!("{s:?}")));
    }
    Ok(s[0])
}

/// `mean_i log(clamp(s_i))`
fn mean_log<T: Real>(tape: &mut Tape<T>, s: Var, eps: f64) -> Result<Var> {
    let c = tape.clamp(s, eps, 1.0 - eps)?;
    let l = tape.log(c)?;
    tape.mean(l)
}

/// `mean_i log(clamp(1 - s_i))`
fn mean_log_complement<T: Real>(tape: &mut Tape<T>, s: Var, eps: f64) -> Result<Var> {
    let one_minus = tape.affine(s, -1.0, 1.0)?;
    mean_log(tape, one_minus, eps)
}

/// `-(1/m) Σ_i [log D(x|h) + ½(log(1 - D(x|ĥ)) + log(1 - D(x̂|h)))]`
pub fn discriminator_loss<T: Real>(tape: &mut Tape<T>, real_right: Var, real_wrong: Var, fake_right: Var, eps: f64) -> Result<Var> {
    let m = batch_len(tape, "discriminator_loss", real_right)?;
    for v in [real_wrong, fake_right] {
        if batch_len(tape, "discriminator_loss", v)? != m {
            return Err(Error::shape("discriminator_loss", format!("[{m}]"), format!("{:?}", tape.shape(v))));
        }
    }
    let a = mean_log(tape, real_right, eps)?;
    let b = mean_log_complement(tape, real_wrong, eps)?;
    let c = mean_log_complement(tape, fake_right, eps)?;
    let bc = tape.add(b, c)?;
    let half = tape.scale(bc, 0.5)?;
    let total = tape.add(a, half)?;
    tape.scale(total, -1.0)
}

/// Non-saturating generator term `-(1/m) Σ_i log D(G(z|h)|h)`.
pub fn contextual_loss<T: Real>(tape: &mut Tape<T>, fake_right: Var, eps: f64) -> Result<Var> {
    batch_len(tape, "contextual_loss", fake_right)?;
    let l = mean_log(tape, fake_right, eps)?;
    tape.scale(l, -1.0)
}

/// `(1/m) Σ_i ||a_i - b_i||²` summed over every element of each example.
fn batch_sq_dist<T: Real>(tape: &mut Tape<T>, op: &'static str, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, format!("{:?}", tape.shape(a)), format!("{:?}", tape.shape(b))));
    }
    let m = tape.shape(a)[0];
    let d = tape.sub(a, b)?;
    let s = tape.sq_l2(d)?;
    tape.scale(s, 1.0 / m as f64)
}

pub fn pixel_loss<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    batch_sq_dist(tape, "pixel_loss", x, x_hat)
}

pub fn activation_loss<T: Real>(tape: &mut Tape<T>, a_real: Var, a_fake: Var) -> Result<Var> {
    batch_sq_dist(tape, "activation_loss", a_real, a_fake)
}

pub fn gram_loss<T: Real>(tape: &mut Tape<T>, a_real: Var, a_fake: Var) -> Result<Var> {
    if tape.shape(a_real) != tape.shape(a_fake) {
        return Err(Error::shape("gram_loss", format!("{:?}", tape.shape(a_real)), format!("{:?}", tape.shape(a_fake))));
    }
    let sr = tape.gram(a_real)?;
    let sf = tape.gram(a_fake)?;
    batch_sq_dist(tape, "gram_loss", sr, sf)
}

/// Generator objective with its two terms kept separately for logging.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: Var,
    pub contextual: Var,
    pub perceptual: Option<Var>,
}

/// `ℓ_cont + λ·ℓ_perc`. `x` are the real images, index-aligned with
/// `x_hat = G(z|h)`; the real side of every perceptual term is a constant.
pub fn generator_loss<T: Real>(
    tape: &mut Tape<T>,
    cfg: &LossConfig,
    fake_right: Var,
    x: Var,
    x_hat: Var,
    feature_net: &FeatureNet<T>,
) -> Result<GeneratorLoss> {
    cfg.validate()?;
    let m = batch_len(tape, "generator_loss", fake_right)?;
    if tape.shape(x)[0] != m || tape.shape(x_hat)[0] != m {
        return Err(Error::shape("generator_loss", format!("batch {m}"), format!("{:?}", tape.shape(x_hat))));
    }
    let contextual = contextual_loss(tape, fake_right, cfg.log_clamp_eps)?;
    let perceptual = match cfg.effective_variant() {
        PerceptualVariant::None => None,
        PerceptualVariant::Pixel => Some(pixel_loss(tape, x, x_hat)?),
        PerceptualVariant::Activation => {
            let ar = feature_net.forward_at(tape, x, cfg.feature_layer)?;
            let af = feature_net.forward_at(tape, x_hat, cfg.feature_layer)?;
            Some(activation_loss(tape, ar, af)?)
        }
        PerceptualVariant::Gram => {
            let ar = feature_net.forward_at(tape, x, cfg.feature_layer)?;
            let af = feature_net.forward_at(tape, x_hat, cfg.feature_layer)?;
            Some(gram_loss(tape, ar, af)?)
        }
    };
    let total = match perceptual {
        None => contextual,
        Some(p) => {
            let weighted = tape.scale(p, cfg.lambda)?;
            tape.add(contextual, weighted)?
        }
    };
    Ok(GeneratorLoss {
        total,
        contextual,
        perceptual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::FeatureNetConfig;
    use crate::tensor::Tensor;

    const EPS: f64 = DEFAULT_LOG_CLAMP_EPS;

    fn scores(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.param(Tensor::new(vec![v.len()], v.to_vec()).unwrap())
    }

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn discriminator_loss_at_max_confusion() {
        let mut t = Tape::new();
        let (a, b, c) = (scores(&mut t, &[0.5; 4]), scores(&mut t, &[0.5; 4]), scores(&mut t, &[0.5; 4]));
        let l = discriminator_loss(&mut t, a, b, c, EPS).unwrap();
        assert!((scalar(&t, l) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn discriminator_loss_perfect_limit() {
        let mut t = Tape::new();
        let (a, b, c) = (scores(&mut t, &[1.0, 1.0]), scores(&mut t, &[0.0, 0.0]), scores(&mut t, &[0.0, 0.0]));
        let l = discriminator_loss(&mut t, a, b, c, EPS).unwrap();
        assert!(scalar(&t, l) < 1e-6);
    }

    #[test]
    fn discriminator_loss_hand_case() {
        let rr: [f64; 2] = [0.9, 0.6];
        let rw: [f64; 2] = [0.2, 0.7];
        let fr: [f64; 2] = [0.4, 0.1];
        let mut expected = 0.0;
        for i in 0..2 {
            expected += rr[i].ln() + 0.5 * ((1.0 - rw[i]).ln() + (1.0 - fr[i]).ln());
        }
        expected = -expected / 2.0;
        let mut t = Tape::new();
        let (a, b, c) = (scores(&mut t, &rr), scores(&mut t, &rw), scores(&mut t, &fr));
        let l = discriminator_loss(&mut t, a, b, c, EPS).unwrap();
        assert!((scalar(&t, l) - expected).abs() < 1e-7);
    }

    #[test]
    fn discriminator_loss_length_mismatch() {
        let mut t = Tape::new();
        let (a, b, c) = (scores(&mut t, &[0.5; 2]), scores(&mut t, &[0.5; 3]), scores(&mut t, &[0.5; 2]));
        assert!(discriminator_loss(&mut t, a, b, c, EPS).is_err());
    }

    #[test]
    fn contextual_loss_values() {
        let mut t = Tape::new();
        let s = scores(&mut t, &[0.5, 0.5]);
        let l = contextual_loss(&mut t, s, EPS).unwrap();
        assert!((scalar(&t, l) - std::f64::consts::LN_2).abs() < 1e-12);

        let s = scores(&mut t, &[0.25, 0.75]);
        let l = contextual_loss(&mut t, s, EPS).unwrap();
        assert!((scalar(&t, l) - 0.836988).abs() < 1e-6);

        let s = scores(&mut t, &[1.0, 1.0]);
        let l = contextual_loss(&mut t, s, EPS).unwrap();
        assert!(scalar(&t, l) < 1e-6);
    }

    #[test]
    fn pixel_and_activation_hand_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = t.constant(Tensor::zeros(&[1, 2]));
        let l = pixel_loss(&mut t, x, y).unwrap();
        assert_eq!(scalar(&t, l), 5.0);

        let a = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let ab = activation_loss(&mut t, a, b).unwrap();
        let ba = activation_loss(&mut t, b, a).unwrap();
        assert_eq!(scalar(&t, ab), 2.0);
        assert_eq!(scalar(&t, ab), scalar(&t, ba));
    }

    #[test]
    fn pixel_loss_is_quadratic_in_scale() {
        let x_data = [0.3, -0.2, 0.9, 0.1];
        let y_data = [-0.5, 0.4, 0.2, 0.0];
        let eval = |c: f64| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(vec![2, 2], x_data.iter().map(|v| v * c).collect()).unwrap());
            let y = t.constant(Tensor::new(vec![2, 2], y_data.iter().map(|v| v * c).collect()).unwrap());
            let l = pixel_loss(&mut t, x, y).unwrap();
            scalar(&t, l)
        };
        assert!((eval(3.0) - 9.0 * eval(1.0)).abs() < 1e-12);
    }

    #[test]
    fn gram_loss_hand_case() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let z = t.constant(Tensor::zeros(&[1, 2, 1, 2]));
        let l = gram_loss(&mut t, a, z).unwrap();
        assert!((scalar(&t, l) - 55.75).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_composition() {
        let net = FeatureNet::<f64>::init(&FeatureNetConfig::default()).unwrap();
        let mut rng = crate::rng::rng_from(5, &[]);
        let xr = Tensor::<f64>::randn(&[2, 3, 16, 16], 0.0, 0.5, &mut rng);
        let xf = Tensor::<f64>::randn(&[2, 3, 16, 16], 0.0, 0.5, &mut rng);
        let s = [0.3, 0.8];

        let build = |cfg: &LossConfig| {
            let mut t = Tape::new();
            let sv = t.param(Tensor::new(vec![2], s.to_vec()).unwrap());
            let x = t.constant(xr.clone());
            let xh = t.param(xf.clone());
            let gl = generator_loss(&mut t, cfg, sv, x, xh, &net).unwrap();
            let p = gl.perceptual.map(|p| scalar(&t, p));
            (scalar(&t, gl.total), scalar(&t, gl.contextual), p)
        };

        let (total, cont, p) = build(&LossConfig::with_variant(PerceptualVariant::None));
        assert_eq!(total, cont);
        assert!(p.is_none());

        for v in PerceptualVariant::ALL {
            let cfg = LossConfig {
                variant: v,
                lambda: 0.0,
                ..LossConfig::default()
            };
            let (total, cont, p) = build(&cfg);
            assert_eq!(total, cont);
            assert!(p.is_none());
        }

        // Independently computed pieces.
        let c_ref = -(0.3f64.ln() + 0.8f64.ln()) / 2.0;
        let p_ref: f64 = xr.data().iter().zip(xf.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2.0;
        let (total, cont, p) = build(&LossConfig::with_variant(PerceptualVariant::Pixel));
        assert!((cont - c_ref).abs() < 1e-12);
        assert!((p.unwrap() - p_ref).abs() < 1e-9 * p_ref);
        let recomposed = c_ref + 1e-6 * p_ref;
        assert!((total - recomposed).abs() <= 1e-9 * recomposed.abs());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("vgg".parse::<PerceptualVariant>().unwrap(), PerceptualVariant::Activation);
        assert!("ssim".parse::<PerceptualVariant>().is_err());
        let json = serde_json::to_string(&PerceptualVariant::Activation).unwrap();
        assert_eq!(json, "\"vgg\"");
    }
}
