use candle_core::{Device, Tensor};
use qagan_core::discriminators::DiscriminatorOutput;
use qagan_core::objectives::{
    discriminator_accuracy, discriminator_loss, generator_loss, DiscriminatorTerms, GeneratorTerms, LossWeights,
    Variant,
};
use qagan_core::seed;
use rand::Rng;

fn out(u: &[f64], c: &[f64]) -> DiscriminatorOutput {
    DiscriminatorOutput {
        uncond_logit: Tensor::new(u, &Device::Cpu).unwrap(),
        cond_logit: Some(Tensor::new(c, &Device::Cpu).unwrap()),
    }
}

fn scalar(x: f64) -> Tensor {
    Tensor::new(x, &Device::Cpu).unwrap()
}

/// ln(1 + e^x) computed without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn mean(v: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    v.iter().map(|x| f(*x)).sum::<f64>() / v.len() as f64
}

#[test]
fn even_odds_generator_example() {
    // every probability at 1/2: each adversarial term is ln 2
    let caption = [out(&[0.0, 0.0], &[0.0, 0.0])];
    let qa = [out(&[0.0], &[0.0])];
    let (d1, d2, v, kl) = (scalar(0.3), scalar(0.2), scalar(0.7), scalar(0.1));
    let terms = GeneratorTerms {
        caption: &caption,
        qa: Some(&qa),
        damsm_caption: Some(&d1),
        damsm_qa: Some(&d2),
        vqa: Some(&v),
        kl: Some(&kl),
        qa_batch: 1,
    };
    let w = LossWeights::default();
    let ln2 = 2f64.ln();
    let (t, r) = generator_loss(&terms, &Variant::Adapted.spec(), &w).unwrap();
    let want = 4.0 * ln2 + 5.0 * 0.5 + 0.7 + 0.1;
    assert!((t.to_scalar::<f64>().unwrap() - want).abs() < 1e-12);
    assert!((r.recompose_g(&w) - want).abs() < 1e-12);
    let (_, r) = generator_loss(&terms, &Variant::Baseline.spec(), &w).unwrap();
    assert!((r.total_g - (2.0 * ln2 + 1.5 + 0.1)).abs() < 1e-12);
    let (_, r) = generator_loss(&terms, &Variant::NaivePretrained.spec(), &LossWeights::strict()).unwrap();
    assert!((r.total_g - (2.0 * ln2 + 0.3 + 0.7)).abs() < 1e-12);
    assert_eq!(r.kl, 0.0);
}

#[test]
fn missing_inputs_are_named() {
    let caption = [out(&[0.0], &[0.0])];
    let d1 = scalar(0.3);
    let terms = GeneratorTerms {
        caption: &caption,
        qa: None,
        damsm_caption: Some(&d1),
        damsm_qa: None,
        vqa: None,
        kl: None,
        qa_batch: 2,
    };
    let err = generator_loss(&terms, &Variant::Adapted.spec(), &LossWeights::strict()).unwrap_err();
    assert!(err.to_string().contains("QA discriminator outputs"));
    assert!(generator_loss(&terms, &Variant::Adapted.spec(), &LossWeights::default()).is_err());
}

#[test]
fn extreme_logits_stay_finite_and_exact() {
    let mut rng = seed::rng(1, "objectives-extreme", &[]);
    for _ in 0..200 {
        let gen = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..3).map(|_| rng.random_range(-30.0..30.0)).collect() };
        let (ru, rc, fu, fc, qu, qc) = (gen(&mut rng), gen(&mut rng), gen(&mut rng), gen(&mut rng), gen(&mut rng), gen(&mut rng));
        let real = [out(&ru, &rc)];
        let fake = [out(&fu, &fc)];
        let qa = [out(&qu, &qc)];
        let terms = DiscriminatorTerms {
            real: &real,
            fake_caption: &fake,
            fake_qa: Some(&qa),
            qa_batch: 3,
        };
        let (t, r) = discriminator_loss(&terms, &Variant::Adapted.spec()).unwrap();
        let want = mean(&ru, |x| softplus(-x))
            + mean(&rc, |x| softplus(-x))
            + mean(&fu, softplus)
            + mean(&fc, softplus)
            + mean(&qu, softplus)
            + mean(&qc, softplus);
        let got = t.to_scalar::<f64>().unwrap();
        assert!(got.is_finite() && (got - want).abs() < 1e-9 * want.max(1.0));
        assert!((r.recompose_d() - want).abs() < 1e-9 * want.max(1.0));

        let d = scalar(0.0);
        let g = GeneratorTerms {
            caption: &fake,
            qa: Some(&qa),
            damsm_caption: Some(&d),
            damsm_qa: Some(&d),
            vqa: Some(&d),
            kl: None,
            qa_batch: 3,
        };
        let (t, _) = generator_loss(&g, &Variant::Adapted.spec(), &LossWeights::strict()).unwrap();
        let want = mean(&fu, |x| softplus(-x)) + mean(&fc, |x| softplus(-x)) + mean(&qu, |x| softplus(-x)) + mean(&qc, |x| softplus(-x));
        let got = t.to_scalar::<f64>().unwrap();
        assert!(got.is_finite() && (got - want).abs() < 1e-9 * want.max(1.0));
    }
}

#[test]
fn accuracy_counts_sides_of_zero() {
    let real = [out(&[1.0, -1.0, 2.0], &[0.0; 3])];
    let fake = [out(&[-3.0, 0.5, -0.1], &[0.0; 3])];
    assert!((discriminator_accuracy(&real, &fake).unwrap() - 4.0 / 6.0).abs() < 1e-12);
    assert!(discriminator_accuracy(&[], &[]).is_err());
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("adaptive".parse::<Variant>().unwrap_err().to_string().contains("adapted"));
}
