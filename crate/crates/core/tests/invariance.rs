use mfrl::activation::ActivationSpec;
use mfrl::discrete::{self, ParamTensor};
use mfrl::harness::{make_dataset, DataConfig, LabelModel};
use mfrl::measures::init_gaussian_paths;
use mfrl::odeflow::{
    coupled_reference_flow, dissipation_rate, frechet_gradient, loss_continuous, meanfield_flow_step, FlowState,
    ParamPathEnsemble, ReferenceField,
};
use mfrl::Dataset;
use proptest::prelude::*;

fn setup(name: &str, particles: usize, nodes: usize, seed: u64) -> (ActivationSpec, ParamPathEnsemble, Dataset) {
    let spec = ActivationSpec::from_name(name, 2, 0.1).unwrap();
    let cfg = DataConfig { n: 6, r_mu: 1.0, labels: LabelModel::SmoothFunction, teacher_width: 4, teacher_scale: 0.5 };
    let data = make_dataset(&spec, &cfg, nodes, seed).unwrap();
    let ens = init_gaussian_paths(particles, spec.k(), 0.8, 0.3, nodes, seed).unwrap();
    (spec, ens, data)
}

#[test]
fn relabeling_and_duplication_leave_the_flow_unchanged() {
    for name in ["two_homog", "partial_one_homog", "generic_tanh"] {
        let (spec, ens, data) = setup(name, 5, 9, 3);
        let perm = [3, 0, 4, 1, 2];
        let permuted = ens.permuted(&perm).unwrap();
        let doubled = ens.duplicated();
        let base = FlowState::new(ens.clone(), &spec, &data).unwrap();
        let p = FlowState::new(permuted, &spec, &data).unwrap();
        let dup = FlowState::new(doubled, &spec, &data).unwrap();
        assert_eq!(base.loss(), p.loss());
        assert_eq!(base.loss(), dup.loss());
        assert_eq!(dissipation_rate(&base), dissipation_rate(&p));
        assert_eq!(dissipation_rate(&base), dissipation_rate(&dup));

        let next = meanfield_flow_step(base, &spec, &data, 0.05).unwrap();
        let next_p = meanfield_flow_step(p, &spec, &data, 0.05).unwrap();
        let next_dup = meanfield_flow_step(dup, &spec, &data, 0.05).unwrap();
        assert_eq!(next.ensemble().permuted(&perm).unwrap(), *next_p.ensemble());
        assert_eq!(next.ensemble().duplicated(), *next_dup.ensemble());
    }
}

#[test]
fn node_field_matches_pointwise_gradient() {
    let (spec, ens, data) = setup("generic_tanh", 3, 5, 8);
    let state = FlowState::new(ens.clone(), &spec, &data).unwrap();
    let k = spec.k();
    for m in 0..3 {
        for j in 0..5 {
            let v = frechet_gradient(&ens, &spec, ens.node(m, j), ens.time(j), state.cache()).unwrap();
            let o = (m * 5 + j) * k;
            assert_eq!(&state.field()[o..o + k], v.as_slice());
        }
    }
}

#[test]
fn own_reference_field_reproduces_the_flow_step() {
    let (spec, ens, data) = setup("two_homog", 4, 9, 5);
    let state = FlowState::new(ens, &spec, &data).unwrap();
    let reference = ReferenceField::from_state(&state);
    let coupled = coupled_reference_flow(state.clone(), &spec, &data, &reference, 0.1).unwrap();
    let own = meanfield_flow_step(state, &spec, &data, 0.1).unwrap();
    assert_eq!(coupled.ensemble(), own.ensemble());
    assert_eq!(coupled.loss(), own.loss());
}

#[test]
fn zero_reference_field_freezes_the_ensemble() {
    let (spec, teacher, data) = setup("generic_tanh", 3, 5, 1);
    let labels: Vec<f64> = (0..data.len())
        .map(|i| data.readout().eval(mfrl::odeflow::forward_ode(&teacher, &spec, data.sample(i)).unwrap().output()))
        .collect();
    let fitted = data.with_labels(labels).unwrap();
    let reference = ReferenceField::from_state(&FlowState::new(teacher, &spec, &fitted).unwrap());
    let (_, other, _) = setup("generic_tanh", 6, 3, 2);
    let state = FlowState::new(other.clone(), &spec, &fitted).unwrap();
    let next = coupled_reference_flow(state, &spec, &fitted, &reference, 0.5).unwrap();
    assert_eq!(*next.ensemble(), other);
}

#[test]
fn discrete_loss_approaches_continuous_at_first_order() {
    let (spec, ens, data) = setup("generic_tanh", 4, 257, 6);
    let limit = loss_continuous(&ens, &spec, &data).unwrap();
    let gaps: Vec<f64> = [8, 16, 32, 64]
        .iter()
        .map(|&l| (discrete::loss(&ens.sample_layers(l).unwrap(), &spec, &data).unwrap() - limit).abs())
        .collect();
    for w in gaps.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..=2.5).contains(&ratio), "gaps {gaps:?}");
    }
}

fn param_tensor(depth: usize, width: usize, k: usize) -> impl Strategy<Value = ParamTensor> {
    prop::collection::vec(-1.5f64..1.5, depth * width * k)
        .prop_map(move |v| ParamTensor::from_vec(depth, width, k, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn discrete_loss_is_permutation_and_duplication_invariant(
        params in param_tensor(3, 4, 5),
        shift in 0usize..4,
    ) {
        let spec = ActivationSpec::from_name("generic_tanh", 2, 0.1).unwrap();
        let cfg = DataConfig { n: 4, r_mu: 1.0, labels: LabelModel::SmoothFunction, teacher_width: 2, teacher_scale: 0.5 };
        let data = make_dataset(&spec, &cfg, 3, 9).unwrap();
        let mut rotated = params.clone();
        for l in 0..3 {
            for m in 0..4 {
                rotated.get_mut(l, (m + shift) % 4).copy_from_slice(params.get(l, m));
            }
        }
        let e = discrete::loss(&params, &spec, &data).unwrap();
        prop_assert_eq!(e, discrete::loss(&rotated, &spec, &data).unwrap());
        prop_assert_eq!(e, discrete::loss(&params.duplicated_columns(), &spec, &data).unwrap());
    }
}
