mod common;

use candle_core::{Device, Tensor, Var};
use qagan_core::generator::{kl_to_standard_normal, word_attention};
use qagan_core::seed;
use rand::Rng;

use common::{check_gradients, randn, vars_of, TinyPipeline};

#[test]
fn kl_matches_closed_form() {
    let mut rng = seed::rng(1, "kl-test", &[]);
    for _ in 0..20 {
        let (b, d) = (rng.random_range(1..5), rng.random_range(1..7));
        let mu: Vec<f64> = (0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lv: Vec<f64> = (0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut expected = 0.0;
        for i in 0..b * d {
            expected += 0.5 * (lv[i].exp() + mu[i] * mu[i] - 1.0 - lv[i]);
        }
        expected /= b as f64;
        let t = |v: &[f64]| Tensor::from_slice(v, (b, d), &Device::Cpu).unwrap();
        let kl = kl_to_standard_normal(&t(&mu), &t(&lv)).unwrap().to_scalar::<f64>().unwrap();
        assert!((kl - expected).abs() < 1e-9);
    }
    let ones = Tensor::ones((1, 6), candle_core::DType::F64, &Device::Cpu).unwrap();
    let zeros = ones.zeros_like().unwrap();
    let kl = kl_to_standard_normal(&ones, &zeros).unwrap().to_scalar::<f64>().unwrap();
    assert!((kl - 3.0).abs() < 1e-12);
    let kl = kl_to_standard_normal(&zeros, &zeros).unwrap().to_scalar::<f64>().unwrap();
    assert_eq!(kl, 0.0);
}

#[test]
fn attention_is_a_softmax_of_scores() {
    let mut rng = seed::rng(2, "attn-test", &[]);
    let (c, h, w, t) = (4, 2, 3, 3);
    let hidden = randn(&[1, c, h, w], &mut rng);
    let words = randn(&[1, c, t], &mut rng);
    let mask = Tensor::ones((1, t), candle_core::DType::F64, &Device::Cpu).unwrap();
    let (context, attn) = word_attention(&hidden, &words, &mask).unwrap();
    let hv = hidden.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let wv = words.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let av = attn.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let cv = context.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    for n in 0..h * w {
        let scores: Vec<f64> = (0..t).map(|j| (0..c).map(|k| hv[k * h * w + n] * wv[k * t + j]).sum()).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..t {
            assert!((av[n * t + j] - scores[j].exp() / z).abs() < 1e-6);
        }
        for k in 0..c {
            let ctx: f64 = (0..t).map(|j| wv[k * t + j] * scores[j].exp() / z).sum();
            assert!((cv[k * h * w + n] - ctx).abs() < 1e-6);
        }
    }
}

#[test]
fn single_valid_word_takes_all_weight() {
    let mut rng = seed::rng(3, "attn-one", &[]);
    let hidden = randn(&[1, 3, 2, 2], &mut rng);
    let words = randn(&[1, 3, 4], &mut rng);
    let mask = Tensor::from_vec(vec![0.0f64, 0.0, 1.0, 0.0], (1, 4), &Device::Cpu).unwrap();
    let (_, attn) = word_attention(&hidden, &words, &mask).unwrap();
    for row in attn.squeeze(0).unwrap().to_vec2::<f64>().unwrap() {
        assert_eq!(row, vec![0.0, 0.0, 1.0, 0.0]);
    }
}

#[test]
fn mean_pixel_gradient_matches_central_differences() {
    let p = TinyPipeline::new(4);
    let mut noise = seed::rng(4, "gen-noise", &[]);
    let (z, eps) = p.generator.sample_inputs(p.captions.len(), &mut noise).unwrap();
    let text = p.text.encode(&p.captions).unwrap().detach();
    let f = || p.generator.generate(&z, &eps, &text).unwrap().final_image().mean_all().unwrap();
    let g = check_gradients(&vars_of(&p.generator.store), f, 60, 1e-3, 1e-5, "gen-mean-pixel");
    assert!(g.max_rel_err < 1e-5 && g.kinks <= 12, "{g:?}");
}

#[test]
fn generation_is_deterministic_and_reaches_text() {
    let p = TinyPipeline::new(5);
    let mut noise = seed::rng(5, "gen-noise", &[]);
    let (z, eps) = p.generator.sample_inputs(p.captions.len(), &mut noise).unwrap();
    let text = p.text.encode(&p.captions).unwrap();
    let a = p.generator.generate(&z, &eps, &text).unwrap();
    let b = p.generator.generate(&z, &eps, &text).unwrap();
    for (x, y) in a.images.iter().zip(&b.images) {
        assert_eq!(
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }
    assert_eq!(a.images.len(), 2);
    assert_eq!(a.images[1].dims(), &[3, 3, 16, 16]);
    // the word features feed the refinement stage
    let words = Var::from_tensor(&text.words).unwrap();
    let t2 = qagan_core::text_encoder::TextFeatures {
        words: words.as_tensor().clone(),
        ..text.clone()
    };
    let img = p.generator.generate(&z, &eps, &t2).unwrap();
    let grads = img.final_image().sqr().unwrap().sum_all().unwrap().backward().unwrap();
    let gw = grads.get(&words).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
    assert!(gw > 0.0);
}
