use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikelab::energy::{instrument, Charge, EnergyReport, E_AC_PJ, E_MAC_PJ};
use spikelab::layers::{LayerKind, LayerRecord, Part, ShortcutKind};
use spikelab::model::{build, ArchSpec, ShortcutSite};
use spikelab_numcore::Tensor;

fn record(name: &str, stage: usize, part: Part, flops: u64, mean: f64, max: f64, encoding: bool) -> LayerRecord {
    LayerRecord {
        name: name.into(),
        stage,
        part,
        kind: LayerKind::Conv,
        flops,
        input_mean: mean,
        input_max: max,
        encoding,
        timesteps: 4,
    }
}

#[test]
fn hand_computed_report() {
    let recs = vec![
        record("enc", 0, Part::PatchEmbed, 1000, 0.3, 1.0, true),
        record("mix", 0, Part::TokenMix, 2000, 0.25, 1.0, false),
        record("mlp", 1, Part::Mlp, 500, 0.5, 2.0, false),
    ];
    let r = EnergyReport::from_records(&recs).unwrap();
    assert_eq!(r.rows[0].charge, Charge::Mac);
    assert_eq!(r.rows[0].fr, 1.0);
    assert_eq!(r.rows[0].sops, 4000.0);
    assert_eq!(r.rows[0].energy_aj, 18_400_000_000);
    assert_eq!(r.rows[1].sops, 2000.0);
    assert_eq!(r.rows[1].energy_aj, 1_800_000_000);
    assert_eq!(r.rows[2].energy_aj, 900_000_000);
    assert!(r.rows[2].multi_bit && r.multi_bit);
    assert_eq!(r.total_aj, 21_100_000_000);
    assert_eq!(r.total_pj(), 21_100.0);
    assert_eq!(r.stage_totals.len(), 3);
    assert_eq!(r.mac_aj(), 18_400_000_000);

    let bad = record("x", 0, Part::Mlp, 10, 2.5, 3.0, false);
    assert!(EnergyReport::from_records(&[bad]).is_err());
}

fn random_images(seed: u64, batch: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[batch, 1, 16, 16], |_| rng.random_range(0.0..1.0))
}

#[test]
fn instrumented_rows_obey_the_sop_rule() {
    let net = build(&ArchSpec::tiny()).unwrap();
    let r = instrument(&net, &random_images(1, 2)).unwrap();
    assert!(!r.rows.is_empty());
    let mut stage_sums = std::collections::BTreeMap::new();
    for row in &r.rows {
        assert_eq!(row.sops, row.fr * row.timesteps as f64 * row.flops as f64, "{}", row.layer);
        let unit = if row.charge == Charge::Mac { E_MAC_PJ } else { E_AC_PJ };
        assert_eq!(row.energy_aj, (row.sops * unit * 1e6).round() as u64, "{}", row.layer);
        *stage_sums.entry((row.stage, row.part)).or_insert(0u64) += row.energy_aj;
    }
    for t in &r.stage_totals {
        assert_eq!(stage_sums[&(t.stage, t.part)], t.energy_aj);
    }
    assert_eq!(r.total_aj, r.rows.iter().map(|x| x.energy_aj).sum::<u64>());
    assert!(!r.multi_bit);
    assert_eq!(r.rows.iter().filter(|x| x.charge == Charge::Mac).count(), 2);

    let matmuls: Vec<_> = r.rows.iter().filter(|x| x.kind == LayerKind::SpikeMatmul).collect();
    assert_eq!(matmuls.len(), 2);
    assert!(matmuls.iter().all(|x| x.flops == 2 * 64 * 64));
    let head = r.rows.iter().find(|x| x.kind == LayerKind::Linear).unwrap();
    assert_eq!((head.flops, head.part), (2 * 64 * 2, Part::Classifier));
}

#[test]
fn zero_input_costs_only_the_encoder() {
    let spec = ArchSpec::tiny();
    let net = build(&spec).unwrap();
    let r = instrument(&net, &Tensor::zeros(&[1, 1, 16, 16])).unwrap();
    let first: u64 = r.rows.iter().filter(|x| x.charge == Charge::Mac).map(|x| x.flops).sum();
    let expected_aj = (E_MAC_PJ * 1e6) as u64 * first * spec.timesteps as u64;
    assert_eq!(r.total_aj, expected_aj);
    assert!(r.rows.iter().filter(|x| x.charge == Charge::Ac).all(|x| x.sops == 0.0 && x.energy_aj == 0));
}

#[test]
fn prespike_shortcut_marks_multi_bit_rows() {
    let mut net = build(&ArchSpec::tiny()).unwrap();
    net.set_shortcut(2, 0, ShortcutSite::Mlp, ShortcutKind::PreSpike).unwrap();
    let r = instrument(&net, &random_images(1, 2)).unwrap();
    assert!(r.multi_bit);
    let head = r.rows.iter().find(|x| x.kind == LayerKind::Linear).unwrap();
    assert!(head.multi_bit);
    assert!(r.notes.iter().any(|n| n.contains("multi-bit")));
}

#[test]
fn report_serialisations_round_trip() {
    let net = build(&ArchSpec::tiny()).unwrap();
    let r = instrument(&net, &random_images(3, 1)).unwrap();
    let csv = r.to_csv();
    assert!(csv.starts_with(EnergyReport::CSV_HEADER));
    let back = EnergyReport::from_csv(&csv).unwrap();
    assert_eq!(back.rows, r.rows);
    assert_eq!(back.total_aj, r.total_aj);
    assert_eq!(EnergyReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    assert!(r.summary_table().contains("total"));
}
