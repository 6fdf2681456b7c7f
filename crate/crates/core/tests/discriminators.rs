mod common;

use candle_core::Var;
use qagan_core::seed;

use common::{check_gradients, randn, vars_of, TinyPipeline};

#[test]
fn heads_match_central_differences_at_every_stage() {
    let p = TinyPipeline::new(6);
    let mut rng = seed::rng(6, "disc-test", &[]);
    for d in &p.discriminators.stages {
        let r = d.resolution;
        let image = Var::from_tensor(&randn(&[3, 3, r, r], &mut rng)).unwrap();
        let sentence = randn(&[3, 8], &mut rng);
        let f = || {
            let o = d.discriminate(image.as_tensor(), Some(&sentence)).unwrap();
            (qagan_core::nn::softplus(&o.uncond_logit).unwrap().sum_all().unwrap()
                - qagan_core::nn::softplus(&o.cond_logit.unwrap().neg().unwrap()).unwrap().sum_all().unwrap())
            .unwrap()
        };
        let mut vars = vars_of(&d.store);
        vars.push(image.clone());
        let g = check_gradients(&vars, f, 50, 1e-4, 1e-5, &format!("disc-{r}"));
        assert!(g.max_rel_err < 1e-5 && g.kinks <= 10, "{r}: {g:?}");
    }
}

#[test]
fn unconditional_logit_ignores_the_sentence() {
    let p = TinyPipeline::new(7);
    let mut rng = seed::rng(7, "disc-uncond", &[]);
    let d = &p.discriminators.stages[0];
    let image = randn(&[2, 3, 8, 8], &mut rng);
    let a = d.discriminate(&image, Some(&randn(&[2, 8], &mut rng))).unwrap();
    let b = d.discriminate(&image, Some(&randn(&[2, 8], &mut rng))).unwrap();
    assert_eq!(a.uncond_logit.to_vec1::<f64>().unwrap(), b.uncond_logit.to_vec1::<f64>().unwrap());
    assert_ne!(
        a.cond_logit.unwrap().to_vec1::<f64>().unwrap(),
        b.cond_logit.unwrap().to_vec1::<f64>().unwrap()
    );
    assert!(d.discriminate(&image, None).unwrap().cond_logit.is_none());
}
