use std::collections::HashSet;
use std::fs;

use advmask::data::{
    generate_synthetic_ecg, load_dataset, read_record_file, save_dataset, split_dataset,
    subsample_fraction, write_record_file, Balance, Dataset, Gender, Rhythm, SignalRecord, Split,
    SplitFractions, SyntheticConfig, Task, LEAD_NAMES, MANIFEST,
};
use advmask::objectives::cross_entropy;
use advmask::params::ParameterSet;
use advmask::tensor::{Tape, Tensor};
use advmask::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic(n: usize, seed: u64) -> Dataset {
    generate_synthetic_ecg(
        &SyntheticConfig {
            n_records: n,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

#[test]
fn chapman_balance_and_gender_share() {
    let ds = synthetic(100, 1);
    let count = |r: Rhythm| {
        ds.records
            .iter()
            .filter(|x| x.labels.unwrap().rhythm == r)
            .count()
    };
    assert_eq!(
        [Rhythm::Afib, Rhythm::Gsvt, Rhythm::Sb, Rhythm::Sr].map(count),
        [36, 22, 21, 21]
    );
    let males = ds
        .records
        .iter()
        .filter(|x| x.labels.unwrap().gender == Gender::Male)
        .count();
    assert_eq!(males, 56);
    assert_eq!(Balance::Chapman.proportions(), [0.36, 0.22, 0.21, 0.21]);
}

#[test]
fn generator_is_deterministic_and_normalised() {
    let a = synthetic(20, 5);
    assert_eq!(a, synthetic(20, 5));
    assert_ne!(a.records[0].signal, synthetic(20, 6).records[0].signal);
    for r in &a.records {
        assert_eq!(r.signal.shape(), &[12, 256]);
        for row in r.signal.data().chunks(256) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 256.0;
            let std = (row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 256.0).sqrt();
            assert!(
                mean.abs() < 1e-3 && (std - 1.0).abs() < 1e-3,
                "{} {mean} {std}",
                r.id
            );
        }
    }
}

/// Intervals between QRS complexes, found as peaks of the slope energy
/// summed over leads (the wide T wave has far gentler slopes).
fn rr_intervals(signal: &Tensor, fs: f64) -> Vec<f64> {
    let d = signal.shape()[1];
    let x = signal.data();
    let energy: Vec<f32> = (0..d - 1)
        .map(|t| {
            (0..12)
                .map(|l| (x[l * d + t + 1] - x[l * d + t]).powi(2))
                .sum()
        })
        .collect();
    let top = energy.iter().copied().fold(f32::MIN, f32::max);
    let refractory = (0.2 * fs) as usize;
    let mut peaks: Vec<usize> = Vec::new();
    for t in 1..energy.len() - 1 {
        if energy[t] > 0.3 * top && energy[t] >= energy[t - 1] && energy[t] > energy[t + 1] {
            match peaks.last() {
                Some(&p) if t - p < refractory => {
                    if energy[t] > energy[p] {
                        *peaks.last_mut().unwrap() = t;
                    }
                }
                _ => peaks.push(t),
            }
        }
    }
    peaks
        .windows(2)
        .map(|w| (w[1] - w[0]) as f64 / fs)
        .collect()
}

#[test]
fn rhythm_classes_follow_their_rate_bands() {
    let config = SyntheticConfig {
        n_records: 80,
        length: 1250,
        rhythm_proportions: [0.25; 4],
        ..Default::default()
    };
    let ds = generate_synthetic_ecg(&config, 2).unwrap();
    for rhythm in Rhythm::ALL {
        let (lo, hi) = match rhythm {
            Rhythm::Sb => (40.0, 55.0),
            Rhythm::Sr => (60.0, 90.0),
            Rhythm::Gsvt => (150.0, 200.0),
            Rhythm::Afib => (90.0, 140.0),
        };
        let mut cvs = Vec::new();
        for r in ds
            .records
            .iter()
            .filter(|r| r.labels.unwrap().rhythm == rhythm)
        {
            let rr = rr_intervals(&r.signal, 125.0);
            let mean = rr.iter().sum::<f64>() / rr.len() as f64;
            let bpm = 60.0 / mean;
            assert!(
                bpm > lo * 0.95 && bpm < hi * 1.05,
                "{rhythm} {}: {bpm:.1} bpm",
                r.id
            );
            let sd = (rr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rr.len() as f64).sqrt();
            cvs.push(sd / mean);
        }
        let cv = cvs.iter().sum::<f64>() / cvs.len() as f64;
        if rhythm == Rhythm::Afib {
            assert!(cv > 0.08, "AFIB irregularity {cv}");
        } else {
            assert!(cv < 0.05, "{rhythm} irregularity {cv}");
        }
    }
}

/// Two-layer MLP on the raw signal; returns train accuracy.
fn mlp_train_accuracy(ds: &Dataset, task: Task) -> f64 {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let x = ds.batch(&idx).unwrap();
    let n = ds.len();
    let dim = x.numel() / n;
    let x = x.reshape(&[n, dim]).unwrap();
    let y = ds.targets(&idx, task).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut init = |shape: &[usize], fan_in: usize| {
        let b = (6.0 / fan_in as f32).sqrt();
        Tensor::new(
            shape.to_vec(),
            (0..shape.iter().product())
                .map(|_| rng.random_range(-b..b))
                .collect(),
        )
        .unwrap()
    };
    let hidden = 32;
    let mut ps = ParameterSet::new();
    ps.insert("w1", init(&[dim, hidden], dim)).unwrap();
    ps.insert("b1", Tensor::zeros(&[hidden])).unwrap();
    ps.insert("w2", init(&[hidden, task.n_classes()], hidden))
        .unwrap();
    ps.insert("b2", Tensor::zeros(&[task.n_classes()])).unwrap();
    let mut accuracy = 0.0;
    for _ in 0..150 {
        let tape = Tape::new();
        let bind = ps.bind(&tape, true);
        let h = tape
            .constant(x.clone())
            .matmul(bind.get("w1").unwrap())
            .unwrap()
            .add(bind.get("b1").unwrap())
            .unwrap()
            .relu();
        let logits = h
            .matmul(bind.get("w2").unwrap())
            .unwrap()
            .add(bind.get("b2").unwrap())
            .unwrap();
        let l = logits.value();
        let c = task.n_classes();
        let correct = (0..n)
            .filter(|&i| {
                let row = &l.data()[i * c..(i + 1) * c];
                (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap() == y[i]
            })
            .count();
        accuracy = correct as f64 / n as f64;
        let loss = cross_entropy(logits, &y).unwrap();
        let grads = tape.backward(loss).unwrap();
        ps.accumulate_grads(&bind, &grads).unwrap();
        drop(bind);
        ps.adam_step(1e-3).unwrap();
        ps.zero_grad();
    }
    accuracy
}

#[test]
fn both_tasks_are_learnable_from_raw_signals() {
    let ds = synthetic(512, 3);
    for task in [Task::Arrhythmia, Task::Gender] {
        let acc = mlp_train_accuracy(&ds, task);
        assert!(acc > 0.9, "{task}: train accuracy {acc}");
    }
}

#[test]
fn save_load_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = split_dataset(&synthetic(30, 4), SplitFractions::default(), 0).unwrap();
    save_dataset(&ds, dir.path(), false).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);

    // saving again without force is refused; with force the bytes repeat
    assert!(save_dataset(&ds, dir.path(), false).is_err());
    let manifest = fs::read(dir.path().join(MANIFEST)).unwrap();
    save_dataset(&back, dir.path(), true).unwrap();
    assert_eq!(fs::read(dir.path().join(MANIFEST)).unwrap(), manifest);
    let text = String::from_utf8(manifest).unwrap();
    assert!(text.contains("\"AFIB\": ") && text.contains("\"normalization\": \"zscore\""));
}

#[test]
fn wrong_lead_count_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&synthetic(3, 5), dir.path(), false).unwrap();
    write_record_file(&dir.path().join("syn00001.ecg"), &Tensor::zeros(&[11, 256])).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(
        matches!(&err, Error::InvalidRecord { record_id, .. } if record_id == "syn00001"),
        "{err}"
    );
    assert!(err.to_string().contains("11"));
}

#[test]
fn truncated_and_corrupt_files_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&synthetic(3, 6), dir.path(), false).unwrap();
    let path = dir.path().join("syn00002.ecg");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(
        load_dataset(dir.path()),
        Err(Error::Format { .. })
    ));

    fs::write(&path, b"ECG").unwrap();
    assert!(load_dataset(dir.path()).is_err());

    let mut nan = Tensor::zeros(&[12, 256]);
    nan.data_mut()[300] = f32::NAN;
    write_record_file(&path, &nan).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(
        err.contains("syn00002") && err.contains("non-finite"),
        "{err}"
    );

    fs::write(dir.path().join(MANIFEST), "{\"format\":").unwrap();
    assert!(load_dataset(dir.path())
        .unwrap_err()
        .to_string()
        .contains("malformed manifest"));
}

#[test]
fn raw_csv_records_are_imported_and_normalised() {
    let dir = tempfile::tempdir().unwrap();
    // columns deliberately out of order
    let order = [11usize, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
    let header: Vec<&str> = order.iter().map(|&l| LEAD_NAMES[l]).collect();
    let mut csv = header.join(",") + "\n";
    for t in 0..40 {
        let row: Vec<String> = order
            .iter()
            .map(|&l| format!("{}", (l * 100 + t) as f32 * 0.5))
            .collect();
        csv += &(row.join(",") + "\n");
    }
    fs::write(dir.path().join("a.csv"), csv).unwrap();
    let manifest = serde_json::json!({
        "format": "advmask-ecg",
        "schema_version": 1,
        "sampling_rate_hz": 500.0,
        "length": 40,
        "lead_order": LEAD_NAMES,
        "normalization": "none",
        "provenance": "hand written",
        "records": [{"id": "a", "file": "a.csv", "rhythm": "SR", "gender": "female"}]
    });
    fs::write(dir.path().join(MANIFEST), manifest.to_string()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let s = &ds.records[0].signal;
    // every lead is a ramp, so after z-scoring all leads coincide
    for lead in 1..12 {
        for t in 0..40 {
            assert!((s.data()[lead * 40 + t] - s.data()[t]).abs() < 1e-5);
        }
    }
    assert!(s.data()[0] < 0.0 && s.data()[39] > 0.0);
}

fn labelled(n_per_class: [usize; 4]) -> Dataset {
    let mut records = Vec::new();
    for (c, &n) in n_per_class.iter().enumerate() {
        for k in 0..n {
            records.push(
                SignalRecord::new(
                    format!("r{c}_{k}"),
                    Tensor::zeros(&[12, 4]),
                    100.0,
                    Some(advmask::data::Labels {
                        rhythm: Rhythm::ALL[c],
                        gender: Gender::ALL[k % 2],
                    }),
                )
                .unwrap(),
            );
        }
    }
    Dataset::new(records, "test").unwrap()
}

#[test]
fn stratified_split_of_a_thousand() {
    let ds = labelled([360, 220, 210, 210]);
    let split = split_dataset(&ds, SplitFractions::default(), 9).unwrap();
    let sizes = [Split::Train, Split::Val, Split::Test].map(|s| split.indices(s).unwrap().len());
    assert_eq!(sizes, [800, 100, 100]);
    for s in [Split::Train, Split::Val, Split::Test] {
        let idx = split.indices(s).unwrap();
        for r in Rhythm::ALL {
            let share = idx
                .iter()
                .filter(|&&i| ds.records[i].labels.unwrap().rhythm == r)
                .count() as f64
                / idx.len() as f64;
            let overall = ds
                .records
                .iter()
                .filter(|x| x.labels.unwrap().rhythm == r)
                .count() as f64
                / 1000.0;
            assert!((share - overall).abs() <= 0.02, "{s:?} {r}");
        }
    }
    assert_eq!(
        split,
        split_dataset(&ds, SplitFractions::default(), 9).unwrap()
    );
    assert_ne!(
        split.splits,
        split_dataset(&ds, SplitFractions::default(), 10)
            .unwrap()
            .splits
    );
}

#[test]
fn tiny_class_cannot_be_split() {
    let err = split_dataset(&labelled([5, 5, 2, 5]), SplitFractions::default(), 0).unwrap_err();
    assert!(err.to_string().contains("SB"), "{err}");
    let bad = SplitFractions {
        train: 0.8,
        val: 0.3,
        test: 0.1,
    };
    assert!(split_dataset(&labelled([5, 5, 5, 5]), bad, 0).is_err());
}

#[test]
fn subsample_counts_and_nesting() {
    let ds = labelled([3066, 1874, 1788, 1788]);
    let pool: Vec<usize> = (0..ds.len()).collect();
    assert_eq!(pool.len(), 8516);
    assert_eq!(subsample_fraction(&ds, &pool, 1.0, 3).unwrap(), pool);
    let one = subsample_fraction(&ds, &pool, 0.01, 3).unwrap();
    let ten = subsample_fraction(&ds, &pool, 0.1, 3).unwrap();
    assert_eq!(one.len(), 85);
    assert_eq!(ten.len(), 852);
    let ten: HashSet<usize> = ten.into_iter().collect();
    assert!(one.iter().all(|i| ten.contains(i)));
    assert!(subsample_fraction(&ds, &pool, 0.0, 3).is_err());
    assert!(subsample_fraction(&ds, &pool, 1.5, 3).is_err());
}

#[test]
fn subsample_keeps_every_class() {
    let ds = labelled([50, 30, 10, 10]);
    let pool: Vec<usize> = (0..ds.len()).collect();
    let picked = subsample_fraction(&ds, &pool, 0.01, 1).unwrap();
    let classes: HashSet<Rhythm> = picked
        .iter()
        .map(|&i| ds.records[i].labels.unwrap().rhythm)
        .collect();
    assert_eq!(classes.len(), 4);
    assert_eq!(picked.len(), 4);
}

#[test]
fn test_split_is_unchanged_by_subsampling() {
    let ds = split_dataset(&synthetic(200, 7), SplitFractions::default(), 1).unwrap();
    let test = ds.indices(Split::Test).unwrap();
    let train = ds.indices(Split::Train).unwrap();
    for fraction in [1.0, 0.1, 0.01] {
        let sub = subsample_fraction(&ds, &train, fraction, 1).unwrap();
        assert!(sub.iter().all(|i| !test.contains(i)));
        assert_eq!(ds.indices(Split::Test).unwrap(), test);
    }
}

#[test]
fn record_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ecg");
    let t = Tensor::new(vec![12, 3], (0..36).map(|i| i as f32 * -0.25).collect()).unwrap();
    write_record_file(&path, &t).unwrap();
    assert_eq!(read_record_file(&path).unwrap(), t);
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"ECG1");
    assert_eq!(bytes.len(), 12 + 36 * 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_partition_records(counts in prop::array::uniform4(3usize..40), seed in any::<u64>()) {
        let ds = split_dataset(&labelled(counts), SplitFractions::default(), seed).unwrap();
        let mut all: Vec<usize> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .flat_map(|&s| ds.indices(s).unwrap())
            .collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        for s in [Split::Train, Split::Val, Split::Test] {
            prop_assert!(!ds.indices(s).unwrap().is_empty());
        }
    }

    #[test]
    fn subsamples_nest(counts in prop::array::uniform4(1usize..60), a in 0.01f64..1.0, b in 0.01f64..1.0, seed in any::<u64>()) {
        let ds = labelled(counts);
        let pool: Vec<usize> = (0..ds.len()).collect();
        let (small, large) = if a < b { (a, b) } else { (b, a) };
        let s = subsample_fraction(&ds, &pool, small, seed).unwrap();
        let l: HashSet<usize> = subsample_fraction(&ds, &pool, large, seed).unwrap().into_iter().collect();
        prop_assert!(s.iter().all(|i| l.contains(i)));
    }
}
