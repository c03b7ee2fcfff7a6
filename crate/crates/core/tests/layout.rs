use proptest::prelude::*;

use seenflow::layout::*;

fn arb_box() -> impl Strategy<Value = LayoutBox> {
    (prop::array::uniform3(-1.0f64..2.0), prop::array::uniform3(0.05f64..1.2), 0usize..4).prop_map(|(c, s, l)| {
        LayoutBox::new(c, s, ["chair", "table", "bed", "sofa"][l]).unwrap()
    })
}

proptest! {
    #[test]
    fn chunk_filter_never_drops_a_painted_box(
        boxes in prop::collection::vec(arb_box(), 0..6),
        origin in prop::array::uniform3(-1.0f64..1.0),
    ) {
        let frame = GridFrame { origin, voxel_size: 0.05, downsample: 4 };
        let shape = [4, 4, 4];
        let hi: [f64; 3] = std::array::from_fn(|a| origin[a] + 16.0 * 0.05);
        let provider = HashEmbedding { dim: 6 };
        let all = paint_layout(&boxes, &frame, shape, &provider, 6).unwrap();
        let local = paint_layout(&boxes_for_chunk(&boxes, origin, hi), &frame, shape, &provider, 6).unwrap();
        prop_assert_eq!(all, local);
    }

    #[test]
    fn cells_hold_the_embedding_of_their_only_box(boxes in prop::collection::vec(arb_box(), 1..5)) {
        let frame = GridFrame { origin: [-1.0; 3], voxel_size: 0.1, downsample: 2 };
        let shape = [8, 8, 8];
        let provider = HashEmbedding { dim: 4 };
        let map = paint_layout(&boxes, &frame, shape, &provider, 4).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    let p = frame.cell_center([i, j, k]);
                    let inside: Vec<&LayoutBox> = boxes.iter().filter(|b| b.contains(p)).collect();
                    let cell = map.cell((i * 8 + j) * 8 + k);
                    match inside.as_slice() {
                        [] => prop_assert!(cell.iter().all(|&v| v == 0.0)),
                        [b] => {
                            let e = provider.embed(&b.label).unwrap();
                            prop_assert!(cell.iter().zip(&e).all(|(&v, &x)| v == x as f32));
                        }
                        _ => {}
                    }
                }
            }
        }
    }
}

#[test]
fn drop_rate_matches_probability() {
    let map = LayoutMap::zeros([2, 2, 2], 3);
    let n = 4000;
    let dropped = (0..n).filter(|&s| drop_condition(map.clone(), 0.3, s).unwrap().null).count();
    let rate = dropped as f64 / n as f64;
    assert!((rate - 0.3).abs() < 0.03, "{rate}");
    assert!(drop_condition(map.clone(), 1.5, 0).is_err());
}

#[test]
fn labels_are_normalized_before_embedding() {
    let p = HashEmbedding { dim: 8 };
    assert_eq!(p.embed("  Chair ").unwrap(), p.embed("chair").unwrap());
    assert_ne!(p.embed("chair").unwrap(), p.embed("table").unwrap());
    assert!(p.embed("   ").is_err());
}
