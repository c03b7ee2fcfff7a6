mod common;

use proptest::prelude::*;
use seenflow::tiling::plan_tiles;

use common::criteria;

#[test]
fn plans_cover_and_normalize_up_to_96() {
    let v = criteria::tiling_coverage(96, 32, 0.2, &[1, 20, 32, 33, 45, 64, 65, 96]);
    assert!(v.pass, "{}", v.detail);
}

#[test]
fn constant_field_tiled_equals_untiled() {
    let v = criteria::constant_field_tiling([48, 40, 33], [32, 32, 32], 0.2);
    assert!(v.pass, "{}", v.detail);
    let v = criteria::constant_field_tiling([11, 7, 16], [4, 4, 4], 0.5);
    assert!(v.pass, "{}", v.detail);
}

proptest! {
    #[test]
    fn blend_of_slices_is_identity(ex in 1usize..20, ey in 1usize..20, ez in 1usize..20, c in 1usize..8, ov in 0.0f64..0.9) {
        let plan = plan_tiles([ex, ey, ez], [c; 3], ov).unwrap();
        let field: Vec<f32> = (0..plan.cells() * 2).map(|i| (i as f32 * 0.37).sin()).collect();
        let chunks: Vec<Vec<f32>> = plan.origins.iter().map(|&o| plan.slice(&field, 2, o).unwrap()).collect();
        prop_assert_eq!(plan.blend(&chunks, 2).unwrap(), field);
    }

    #[test]
    fn plan_stride_never_exceeds_chunk(e in 1usize..200, c in 1usize..40, ov in 0.0f64..0.95) {
        let plan = plan_tiles([e, 1, 1], [c, 1, 1], ov).unwrap();
        let xs: Vec<usize> = plan.origins.iter().map(|o| o[0]).collect();
        prop_assert_eq!(xs[0], 0);
        prop_assert_eq!(xs.last().unwrap() + plan.chunk[0], e);
        prop_assert!(xs.windows(2).all(|w| w[0] < w[1] && w[1] - w[0] <= plan.chunk[0]));
    }
}
