mod support;

use support::{full_stack_fd, small_setup, StackLoss};
use xlpolicy_core::model::Model;
use xlpolicy_core::numerics::Graph;
use xlpolicy_core::sim::{gen_dataset, Task};

#[test]
fn every_loss_differentiates_through_the_full_stack() {
    let (env, cfg) = small_setup();
    for loss in [StackLoss::Clone, StackLoss::Surrogate, StackLoss::Critic] {
        let (n, err) = full_stack_fd(&env, &cfg, loss, 60, 3);
        assert!(n >= 50);
        assert!(err < 1e-3, "{loss:?}: relative error {err:e}");
    }
}

#[test]
fn streaming_matches_batched_on_long_episodes() {
    let (env, cfg) = small_setup();
    let model = Model::new(&cfg, env.action_spec().clone(), 5).unwrap();
    let data = gen_dataset(&env, 3, &[Task::Stack], 2).unwrap();
    for ep in &data {
        // stack episodes span more than one segment of the small encoder
        let obs: Vec<_> = ep.steps.iter().map(|s| &s.obs).collect();
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g, false);
        let out = model.forward(&mut g, &bound, &[obs.clone()]).unwrap();
        let q = g.value(out.q);
        let mut stream = model.stream();
        for (t, o) in obs.iter().enumerate() {
            assert_eq!(stream.step(o).unwrap().q, q.row(t));
        }
    }
}
