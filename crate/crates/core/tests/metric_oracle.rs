mod oracle;

use minmaxcam::wsoleval::V2_DELTAS;
use oracle::{max_discrepancy, module_metrics, naive_max_box_acc, naive_pxap, random_instance, SIDE};

#[test]
fn module_matches_brute_force_on_random_instances() {
    for seed in 0..20 {
        let inst = random_instance(seed);
        let (per_delta, v2, px) = module_metrics(&inst);
        let naive: Vec<f64> = V2_DELTAS.iter().map(|&d| naive_max_box_acc(&inst, d)).collect();
        for (d, (a, b)) in per_delta.iter().zip(&naive).enumerate() {
            assert!((a - b).abs() <= 1e-9, "seed {seed} delta {}: {a} vs {b}", V2_DELTAS[d]);
        }
        let naive_v2 = naive.iter().sum::<f64>() / 3.0;
        assert!((v2 - naive_v2).abs() <= 1e-9, "seed {seed} v2: {v2} vs {naive_v2}");
        let naive_px = naive_pxap(&inst);
        assert!((px - naive_px).abs() <= 1e-9, "seed {seed} pxap: {px} vs {naive_px}");
    }
}

#[test]
fn oracle_agrees_with_hand_instance() {
    // one 16×16 map that is exactly the indicator of its single GT box
    let mut inst = random_instance(0);
    inst.maps.truncate(1);
    inst.boxes.truncate(1);
    inst.masks.truncate(1);
    inst.boxes[0].truncate(1);
    let b = inst.boxes[0][0];
    inst.masks[0] = (0..SIDE * SIDE).map(|i| b.contains(i % SIDE, i / SIDE)).collect();
    inst.maps[0] = inst.masks[0].iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    assert_eq!(naive_max_box_acc(&inst, 0.7), 1.0);
    assert!((naive_pxap(&inst) - 1.0).abs() < 1e-12);
    assert!(max_discrepancy(3) <= 1e-9);
}
