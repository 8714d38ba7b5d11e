mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    for (name, err) in common::gradient_suite(20, 11) {
        assert!(err <= 1e-5, "{name}: relative error {err:e}");
    }
}

#[test]
fn hinges_have_zero_gradient_when_satisfied() {
    use candle_core::{Device, Tensor, Var};
    use wifi2cap::objectives::mirror_hinge_text_only;
    let c = Var::from_tensor(&Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap()).unwrap();
    let t = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
    let tm = Tensor::new(&[[-1.0f64, 0.0]], &Device::Cpu).unwrap();
    let loss = mirror_hinge_text_only(c.as_tensor(), &t, &tm, 0.2).unwrap().sum_all().unwrap();
    assert_eq!(loss.to_scalar::<f64>().unwrap(), 0.0);
    let g = loss.backward().unwrap();
    let gc = g.get(c.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(gc.iter().all(|&x| x == 0.0));
}
