mod common;

use common::criteria::{self, Verdict};

fn check(v: Verdict) {
    assert!(v.pass, "{}", v.detail);
}

#[test]
fn unknown_data_is_invisible_to_losses_and_encoder() {
    check(criteria::mask_blindness(20));
}

#[test]
fn corrupting_known_voxels_does_change_the_loss() {
    let vae = common::tiny_vae(true);
    let params = common::perturbed(&vae.init_params::<f64>(0), 0.05, 1);
    let block = common::random_block([8; 3], 0.06, 2);
    let mut other = block.clone();
    let i = (0..other.len()).find(|&i| other.mask[i] == seenflow::voxgrid::VoxelMask::Surface).unwrap();
    other.tsdf[i] = -other.tsdf[i] + 0.01;
    let a = vae.loss_and_grads(&params, &block, None).unwrap().unwrap().0;
    let b = vae.loss_and_grads(&params, &other, None).unwrap().unwrap().0;
    assert_ne!(a, b);
}

#[test]
fn unmasked_ablation_sees_unknown_voxels() {
    let vae = common::tiny_vae(false);
    let params = vae.init_params::<f64>(0);
    let block = common::random_block([8; 3], 0.06, 2);
    let mut relabeled = block.clone();
    for i in 0..relabeled.len() {
        if !relabeled.mask[i].is_known() {
            relabeled.set(i, seenflow::voxgrid::VoxelMask::Empty, 0.06);
        }
    }
    let a = vae.loss_and_grads(&params, &block, None).unwrap().unwrap().0;
    let b = vae.loss_and_grads(&params, &relabeled, None).unwrap().unwrap().0;
    assert_ne!(a, b);
}

#[test]
fn control_branch_starts_as_identity() {
    check(criteria::control_identity(50));
}

#[test]
fn guidance_algebra() {
    check(criteria::cfg_algebra(50));
}

#[test]
fn euler_is_first_order() {
    check(criteria::euler_convergence());
}
