//! Properties of the synthetic benchmark itself.

use advblur::blur::Image;
use advblur::data::{
    audit_leakage, high_frequency_energy, render_cell, synth_generate, Family, Quality, Split, SplitCounts, SynthSpec,
};
use advblur::eval::auc;

fn energies(spec: &SynthSpec, split: Split, family: Family, quality: Quality) -> (Vec<f64>, Vec<u8>) {
    let (x, labels) = render_cell(spec, split, family, quality).unwrap();
    let e = (0..labels.len()).map(|i| high_frequency_energy(&Image::from_tensor(&x, i))).collect();
    (e, labels)
}

#[test]
fn artifacts_are_learnable_from_high_frequency_energy() {
    // a one-feature linear classifier: its AUC is the AUC of the feature, up to sign
    let spec = SynthSpec::default();
    for family in Family::ARTIFACTS {
        let (e, labels) = energies(&spec, Split::Train, family, Quality::QRaw);
        let a = auc(&e, &labels).unwrap();
        let separability = a.max(1.0 - a);
        println!("{family}: high-frequency energy AUC {separability:.4}");
        if family == Family::Checker {
            assert!(separability > 0.9, "{family}: {separability}");
        }
    }
}

#[test]
fn quality_tiers_remove_high_frequencies_monotonically() {
    let spec = SynthSpec {
        size: 32,
        counts: SplitCounts { train: 0, val: 0, test: 8 },
        seed: 5,
        ..SynthSpec::default()
    };
    for family in Family::ARTIFACTS {
        let tiers: Vec<Vec<f64>> = Quality::ALL.iter().map(|&q| energies(&spec, Split::Test, family, q).0).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&tiers[0]) >= mean(&tiers[1]) && mean(&tiers[1]) >= mean(&tiers[2]), "{family}");
        for i in 0..tiers[0].len() {
            assert!(tiers[0][i] >= tiers[2][i], "{family} image {i}");
        }
    }
}

#[test]
fn splits_share_no_base_images_and_cells_are_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        size: 16,
        counts: SplitCounts { train: 4, val: 2, test: 3 },
        seed: 12,
        ..SynthSpec::default()
    };
    let records = synth_generate(&spec, dir.path()).unwrap();
    audit_leakage(&records).unwrap();
    for split in Split::ALL {
        for family in Family::ARTIFACTS {
            for quality in Quality::ALL {
                let (_, labels) = render_cell(&spec, split, family, quality).unwrap();
                let fakes = labels.iter().filter(|&&l| l == 1).count();
                assert_eq!(fakes, spec.counts.get(split));
                assert_eq!(labels.len(), 2 * fakes);
            }
        }
    }
    // a test base smuggled into train is caught
    let mut bad = records.clone();
    let test = bad.iter().find(|r| r.split == Split::Test).unwrap().clone();
    bad.push(advblur::data::SampleRecord { split: Split::Train, ..test });
    assert!(audit_leakage(&bad).is_err());
}
