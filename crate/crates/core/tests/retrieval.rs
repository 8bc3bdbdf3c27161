//! PCA, search, recall and the synthetic generator against brute-force
//! references.

use vpr_core::retrieval::*;
use vpr_tensor::SeededRng;

/// Cyclic Jacobi eigensolver for a symmetric matrix.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

fn random_data(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    // anisotropic so the spectrum is well separated
    (0..n * d).map(|k| rng.normal() * (1.0 + (k % d) as f64)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn pca_matches_jacobi_oracle() {
    let (n, d) = (100, 16);
    let x = random_data(n, d, 1);
    let m = PcaModel::fit(&x, n, d, d, false).unwrap();
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (x[i * d + a] - mean[a]) * (x[i * d + b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    let (mut vals, vecs) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    vals = order.iter().map(|&k| vals[k]).collect();
    for k in 0..d {
        assert!((m.variances[k] - vals[k]).abs() < 1e-6 * vals[0], "variance {k}");
        let col: Vec<f64> = (0..d).map(|r| vecs[r * d + order[k]]).collect();
        assert!((dot(&col, &m.components[k * d..(k + 1) * d]).abs() - 1.0).abs() < 1e-6);
    }
    for a in 0..d {
        for b in 0..d {
            let g = dot(&m.components[a * d..(a + 1) * d], &m.components[b * d..(b + 1) * d]);
            assert!((g - if a == b { 1.0 } else { 0.0 }).abs() < 1e-5);
        }
    }
    assert!(m.variances.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn wide_data_uses_gram_path_consistently() {
    let (n, d) = (12, 40);
    let x = random_data(n, d, 2);
    let m = PcaModel::fit(&x, n, d, 8, false).unwrap();
    let mut cov = vec![0.0; d * d];
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64)
        .collect();
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (x[i * d + a] - mean[a]) * (x[i * d + b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    for k in 0..8 {
        let c = &m.components[k * d..(k + 1) * d];
        assert!((dot(c, c) - 1.0).abs() < 1e-8);
        let cc: Vec<f64> = (0..d).map(|a| dot(&cov[a * d..(a + 1) * d], c)).collect();
        for a in 0..d {
            assert!((cc[a] - m.variances[k] * c[a]).abs() < 1e-6 * m.variances[0]);
        }
    }
}

#[test]
fn line_data_has_one_component() {
    let n = 50;
    let x: Vec<f64> = (0..n)
        .flat_map(|i| {
            let t = i as f64 - 20.0;
            [3.0 * t + 1.0, 4.0 * t - 2.0]
        })
        .collect();
    let m = PcaModel::fit(&x, n, 2, 2, false).unwrap();
    assert!((m.components[0] * 0.6 + m.components[1] * 0.8).abs() > 0.999);
    assert!(m.variances[1].abs() < 1e-9 * m.variances[0]);
}

#[test]
fn full_rank_projection_is_isometric_and_preserves_rankings() {
    let (n, d) = (60, 10);
    let x = random_data(n, d, 3);
    let m = PcaModel {
        whiten: false,
        ..PcaModel::fit(&x, n, d, d, false).unwrap()
    };
    let project = |r: &[f64]| -> Vec<f64> {
        m.components
            .chunks(d)
            .map(|c| c.iter().zip(r).zip(&m.mean).map(|((c, v), mu)| c * (v - mu)).sum())
            .collect()
    };
    for i in 0..10 {
        for j in 0..10 {
            let (a, b) = (&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
            let raw: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let (pa, pb) = (project(a), project(b));
            let red: f64 = pa.iter().zip(&pb).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            assert!((raw - red).abs() < 1e-5);
        }
    }
    // ranking: unit-normalize centred descriptors, compare searches
    let centred: Vec<f64> = x
        .chunks(d)
        .flat_map(|r| {
            let c: Vec<f64> = r.iter().zip(&m.mean).map(|(v, mu)| v - mu).collect();
            let nrm = dot(&c, &c).sqrt();
            c.into_iter().map(move |v| v / nrm)
        })
        .collect();
    let reduced = m.apply_rows(&x).unwrap();
    let ids: Vec<u64> = (0..n as u64).collect();
    let raw_idx = DescriptorIndex::build(ids.clone(), d, centred.clone()).unwrap();
    let red_idx = DescriptorIndex::build(ids, d, reduced.clone()).unwrap();
    for q in 0..n {
        let a: Vec<u64> = raw_idx
            .search_topk(&centred[q * d..(q + 1) * d], 5)
            .unwrap()
            .iter()
            .map(|h| h.id)
            .collect();
        let b: Vec<u64> = red_idx
            .search_topk(&reduced[q * d..(q + 1) * d], 5)
            .unwrap()
            .iter()
            .map(|h| h.id)
            .collect();
        assert_eq!(a, b);
    }
}

#[test]
fn pca_edges_and_errors() {
    let x = random_data(20, 4, 4);
    let m = PcaModel::fit(&x, 20, 4, 3, true).unwrap();
    assert!(m.apply(&m.mean).unwrap().iter().all(|&v| v == 0.0));
    let y = m.apply(&x[..4]).unwrap();
    assert!((dot(&y, &y) - 1.0).abs() < 1e-12);
    assert!(m.apply(&[1.0; 5]).is_err());
    assert!(PcaModel::fit(&x, 20, 4, 5, false).is_err());
    assert!(PcaModel::fit(&x[..12], 3, 4, 3, false).is_err());
}

fn brute_force_rank(db: &[f64], ids: &[u64], d: usize, q: &[f64]) -> Vec<u64> {
    let mut scored: Vec<(f64, u64)> = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        let mut s = 0.0;
        for k in 0..d {
            s += db[i * d + k] * q[k];
        }
        scored.push((s, id));
    }
    let mut out = Vec::new();
    while !scored.is_empty() {
        let mut best = 0;
        for j in 1..scored.len() {
            let (a, b) = (scored[j], scored[best]);
            if a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) {
                best = j;
            }
        }
        out.push(scored.remove(best).1);
    }
    out
}

#[test]
fn search_matches_brute_force() {
    let mut rng = SeededRng::new(5);
    let d = 6;
    let ids: Vec<u64> = (0..40).map(|i| 1000 - 7 * i).collect();
    // quantized values create exact ties
    let db: Vec<f64> = (0..40 * d).map(|_| (rng.below(5) as f64 - 2.0) / 2.0).collect();
    let idx = DescriptorIndex::build(ids.clone(), d, db.clone()).unwrap();
    for _ in 0..100 {
        let q: Vec<f64> = (0..d).map(|_| (rng.below(5) as f64 - 2.0) / 2.0).collect();
        let want = brute_force_rank(&db, &ids, d, &q);
        let got: Vec<u64> = idx.search_topk(&q, 40).unwrap().iter().map(|h| h.id).collect();
        assert_eq!(got, want);
        assert_eq!(idx.search_topk(&q, 1000).unwrap().len(), 40);
    }
}

#[test]
fn search_examples() {
    let mut db = vec![0.0; 5 * 5];
    for i in 0..5 {
        db[i * 5 + i] = 1.0;
    }
    let idx = DescriptorIndex::build(vec![10, 11, 12, 13, 14], 5, db.clone()).unwrap();
    let top = idx.search_topk(&db[15..20], 2).unwrap();
    assert_eq!(
        top[0],
        Hit {
            id: 13,
            similarity: 1.0
        }
    );
    assert_eq!(top[1].id, 10);
    assert!(idx.search_topk(&[1.0; 4], 1).is_err());
}

fn rec(id: u64, e: f64, n: f64, heading: Option<f64>, frame: Option<i64>, place: u64, split: Split) -> PlaceRecord {
    PlaceRecord {
        id,
        tensor: String::new(),
        easting: e,
        northing: n,
        heading,
        frame_index: frame,
        place_id: place,
        split,
    }
}

#[test]
fn ground_truth_modes_on_constructed_fixture() {
    let q = rec(0, 0.0, 0.0, Some(350.0), Some(100), 7, Split::Query);
    let near_aligned = rec(1, 20.0, 10.0, Some(20.0), Some(109), 8, Split::Database);
    let near_turned = rec(2, 3.0, 4.0, Some(200.0), Some(111), 7, Split::Database);
    let far = rec(3, 30.0, 0.0, Some(350.0), Some(91), 9, Split::Database);
    let gts = ground_truths();
    let cfg = GroundTruthConfig {
        heading_deg: Some(40.0),
        ..GroundTruthConfig::default()
    };
    let geo = gts.create("geo", &cfg).unwrap();
    assert_eq!(
        [&near_aligned, &near_turned, &far].map(|d| geo.is_match(&q, d)),
        [true, false, false]
    );
    let plain = gts.create("geo", &GroundTruthConfig::default()).unwrap();
    assert_eq!(
        [&near_aligned, &near_turned, &far].map(|d| plain.is_match(&q, d)),
        [true, true, false]
    );
    let frame = gts.create("frame", &GroundTruthConfig::default()).unwrap();
    assert_eq!(
        [&near_aligned, &near_turned, &far].map(|d| frame.is_match(&q, d)),
        [true, false, true]
    );
    let unique = gts.create("unique", &GroundTruthConfig::default()).unwrap();
    assert_eq!(
        [&near_aligned, &near_turned, &far].map(|d| unique.is_match(&q, d)),
        [false, true, false]
    );
    assert!(gts
        .create(
            "geo",
            &GroundTruthConfig {
                dist_m: 0.0,
                ..GroundTruthConfig::default()
            }
        )
        .is_err());
    assert!(gts.create("gps", &GroundTruthConfig::default()).is_err());
    assert_eq!(heading_diff(350.0, 20.0), 30.0);
}

#[test]
fn perfect_and_third_place_rankings() {
    let mut records = Vec::new();
    for p in 0..4u64 {
        records.push(rec(p, p as f64 * 100.0, 0.0, None, None, p, Split::Database));
        records.push(rec(10 + p, p as f64 * 100.0 + 1.0, 0.0, None, None, p, Split::Query));
    }
    let gt = GeoMatch {
        dist_m: 25.0,
        heading_deg: None,
    };
    let perfect: Vec<(u64, Vec<u64>)> = (0..4)
        .map(|p| (10 + p, vec![p, (p + 1) % 4, (p + 2) % 4, (p + 3) % 4]))
        .collect();
    let r = recall_at_n(&perfect, &records, &gt, &DEFAULT_NS).unwrap();
    assert_eq!(r.recall, vec![100.0, 100.0, 100.0]);
    let third: Vec<(u64, Vec<u64>)> = (0..4)
        .map(|p| (10 + p, vec![(p + 1) % 4, (p + 2) % 4, p, (p + 3) % 4]))
        .collect();
    let r = recall_at_n(&third, &records, &gt, &DEFAULT_NS).unwrap();
    assert_eq!(r.recall, vec![0.0, 100.0, 100.0]);
    assert_eq!(r.at(5), Some(100.0));
}

#[test]
fn queries_without_matches_are_excluded() {
    let records = vec![
        rec(0, 0.0, 0.0, None, None, 0, Split::Database),
        rec(1, 1.0, 0.0, None, None, 0, Split::Query),
        rec(2, 500.0, 0.0, None, None, 5, Split::Query),
    ];
    let gt = GeoMatch {
        dist_m: 25.0,
        heading_deg: None,
    };
    let r = recall_at_n(&[(1, vec![0]), (2, vec![0])], &records, &gt, &[1]).unwrap();
    assert_eq!(r.evaluated, 1);
    assert_eq!(r.excluded, vec![2]);
    assert_eq!(r.recall, vec![100.0]);
    assert!(recall_at_n(&[(99, vec![0])], &records, &gt, &[1]).is_err());
}

fn recall_oracle(
    rankings: &[(u64, Vec<u64>)],
    records: &[PlaceRecord],
    gt: &dyn GroundTruth,
    ns: &[usize],
) -> Vec<f64> {
    let find = |id: u64| records.iter().find(|r| r.id == id).unwrap();
    let mut counts = vec![0.0; ns.len()];
    let mut total = 0.0;
    for (q, ranked) in rankings {
        let q = find(*q);
        let mut possible = false;
        for d in records {
            if d.split == Split::Database && gt.is_match(q, d) {
                possible = true;
            }
        }
        if !possible {
            continue;
        }
        total += 1.0;
        for (k, &n) in ns.iter().enumerate() {
            let mut found = false;
            for id in ranked.iter().take(n) {
                if gt.is_match(q, find(*id)) {
                    found = true;
                }
            }
            if found {
                counts[k] += 1.0;
            }
        }
    }
    counts.iter().map(|c| 100.0 * c / total).collect()
}

#[test]
fn recall_matches_brute_force_on_random_sets() {
    let mut rng = SeededRng::new(6);
    for _ in 0..20 {
        let mut records = Vec::new();
        for i in 0..30u64 {
            let split = if i < 20 { Split::Database } else { Split::Query };
            records.push(rec(
                i,
                rng.uniform(0.0, 100.0),
                rng.uniform(0.0, 100.0),
                Some(rng.uniform(0.0, 360.0)),
                Some(rng.below(60) as i64),
                rng.below(8) as u64,
                split,
            ));
        }
        for (mode, gt) in [
            (
                "geo",
                GroundTruthConfig {
                    heading_deg: Some(40.0),
                    ..GroundTruthConfig::default()
                },
            ),
            ("frame", GroundTruthConfig::default()),
            ("unique", GroundTruthConfig::default()),
        ] {
            let gt = ground_truths().create(mode, &gt).unwrap();
            let rankings: Vec<(u64, Vec<u64>)> = (20..30)
                .map(|q| {
                    let mut ids: Vec<u64> = (0..20).collect();
                    rng.shuffle(&mut ids);
                    (q, ids)
                })
                .collect();
            let r = recall_at_n(&rankings, &records, gt.as_ref(), &DEFAULT_NS).unwrap();
            let want = recall_oracle(&rankings, &records, gt.as_ref(), &DEFAULT_NS);
            for (a, b) in r.recall.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9 || (a.is_nan() && b.is_nan()) || (r.evaluated == 0));
            }
            assert!(r.is_monotone());
        }
    }
}

fn pixel_recall(ds: &SynthDataset) -> f64 {
    let d = ds.images.len() / ds.records.len();
    let rows: Vec<Vec<f64>> = ds
        .images
        .data()
        .chunks(d)
        .map(|r| {
            let n = dot(r, r).sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let db = ds.indices(Split::Database);
    let idx = DescriptorIndex::build(
        db.iter().map(|&i| i as u64).collect(),
        d,
        db.iter().flat_map(|&i| rows[i].clone()).collect(),
    )
    .unwrap();
    let queries: Vec<(u64, Vec<f64>)> = ds
        .indices(Split::Query)
        .iter()
        .map(|&i| (i as u64, rows[i].clone()))
        .collect();
    let gt = GeoMatch {
        dist_m: 25.0,
        heading_deg: None,
    };
    evaluate(&idx, &queries, &ds.records, &gt, &[1]).unwrap().recall[0]
}

#[test]
fn default_synthetic_set_is_solvable_in_pixel_space() {
    let ds = synth_dataset_gen(&SynthConfig::default()).unwrap();
    let r = pixel_recall(&ds);
    assert!(r > 80.0, "pixel-space R@1 {r}");
}

#[test]
fn noiseless_set_has_identical_views_and_perfect_recall() {
    let cfg = SynthConfig {
        shift_px: 0.0,
        brightness: 0.0,
        noise: 0.0,
        num_places: 10,
        ..SynthConfig::default()
    };
    let ds = synth_dataset_gen(&cfg).unwrap();
    let d = ds.images.len() / ds.records.len();
    let per = cfg.images_per_place();
    for p in 0..10 {
        let first = &ds.images.data()[p * per * d..(p * per + 1) * d];
        for j in 1..per {
            assert_eq!(&ds.images.data()[(p * per + j) * d..(p * per + j + 1) * d], first);
        }
    }
    assert_eq!(pixel_recall(&ds), 100.0);
}

#[test]
fn synthetic_geometry_and_determinism() {
    let cfg = SynthConfig {
        num_places: 9,
        ..SynthConfig::default()
    };
    let a = synth_dataset_gen(&cfg).unwrap();
    let b = synth_dataset_gen(&cfg).unwrap();
    assert_eq!(a.images.data(), b.images.data());
    assert_eq!(a.records, b.records);
    let gt = GeoMatch {
        dist_m: 25.0,
        heading_deg: None,
    };
    for x in &a.records {
        x.validate().unwrap();
        for y in &a.records {
            assert_eq!(gt.is_match(x, y), x.place_id == y.place_id);
            if x.place_id == y.place_id {
                assert!(x.distance_m(y) <= 10.0);
            }
        }
    }
    assert_eq!(a.indices(Split::Train).len(), 36);
    assert_eq!(a.images.shape(), &[54, 3, 28, 28]);
    let c = synth_dataset_gen(&SynthConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.images.data(), c.images.data());
}
