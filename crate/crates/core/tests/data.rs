use compact_hccr::ink::*;
use compact_hccr::sig::*;
use proptest::prelude::*;

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    let point = (-1e4f32..1e4, -1e4f32..1e4).prop_map(|(x, y)| Point::new(x as f64, y as f64));
    let stroke = prop::collection::vec(point, 1..12);
    let traj = (prop::collection::vec(stroke, 1..4), 0u32..5);
    prop::collection::vec(traj, 0..20).prop_map(|items| {
        let items = items
            .into_iter()
            .map(|(s, l)| Trajectory::new(s, Some(l)).unwrap())
            .collect();
        Dataset::new(items, 5).unwrap()
    })
}

proptest! {
    #[test]
    fn random_datasets_roundtrip(ds in arb_dataset()) {
        for format in [InkFormat::Bin, InkFormat::Json] {
            let bytes = serialize_trajectory_file(&ds, format);
            let back = parse_trajectory_file(&bytes, format, Some(5)).unwrap();
            prop_assert_eq!(&back, &ds);
        }
    }
}

#[test]
fn hundred_record_file_roundtrips() {
    let ds = gen_toy_dataset(4, 25, 3);
    assert_eq!(ds.len(), 100);
    for format in [InkFormat::Bin, InkFormat::Json] {
        let back = parse_trajectory_file(&serialize_trajectory_file(&ds, format), format, None).unwrap();
        assert_eq!(back, ds);
    }
}

#[test]
fn toy_classes_are_separable_by_nearest_centroid() {
    let ds = gen_toy_dataset(10, 200, 7);
    let cfg = RasterConfig::default();
    let maps: Vec<Vec<f32>> = ds
        .items
        .iter()
        .map(|t| rasterize(&normalize(t), &cfg).channel(0).to_vec())
        .collect();
    let labels = ds.labels();
    let n = maps[0].len();
    // First 150 of each class build the centroids, the rest are scored.
    let is_train = |i: usize| i % 200 < 150;
    let mut centroids = vec![vec![0f64; n]; 10];
    for (i, m) in maps.iter().enumerate().filter(|(i, _)| is_train(*i)) {
        for (c, v) in centroids[labels[i]].iter_mut().zip(m) {
            *c += *v as f64 / 150.0;
        }
    }
    let mut correct = 0;
    let mut total = 0;
    for (i, m) in maps.iter().enumerate().filter(|(i, _)| !is_train(*i)) {
        let best = (0..10)
            .min_by(|&a, &b| {
                let d = |c: &Vec<f64>| c.iter().zip(m).map(|(c, v)| (c - *v as f64).powi(2)).sum::<f64>();
                d(&centroids[a]).total_cmp(&d(&centroids[b]))
            })
            .unwrap();
        correct += (best == labels[i]) as usize;
        total += 1;
    }
    let acc = correct as f64 / total as f64;
    assert!(acc > 0.6, "nearest-centroid accuracy {acc}");
}

/// Iterated integrals of a polyline by a fine Riemann sum.
fn riemann_signature(pts: &[Point]) -> [f64; 6] {
    let steps = 2000;
    let (x0, y0) = (pts[0].x, pts[0].y);
    let mut s = [[0f64; 2]; 2];
    for w in pts.windows(2) {
        let (dx, dy) = ((w[1].x - w[0].x) / steps as f64, (w[1].y - w[0].y) / steps as f64);
        for k in 0..steps {
            let t = (k as f64 + 0.5) / steps as f64;
            let off = [w[0].x + t * (w[1].x - w[0].x) - x0, w[0].y + t * (w[1].y - w[0].y) - y0];
            for (i, o) in off.iter().enumerate() {
                s[i][0] += o * dx;
                s[i][1] += o * dy;
            }
        }
    }
    let last = pts[pts.len() - 1];
    [last.x - x0, last.y - y0, s[0][0], s[0][1], s[1][0], s[1][1]]
}

#[test]
fn rendered_pixel_matches_signature_oracle() {
    let pts = vec![Point::new(-0.5, -0.5), Point::new(0.5, -0.5), Point::new(0.5, 0.5)];
    let t = Trajectory::new(vec![pts.clone()], None).unwrap();
    let cfg = RasterConfig {
        image_size: 32,
        resample_spacing: None,
        ..Default::default()
    };
    let fs = rasterize(&t, &cfg);
    assert_eq!(fs.channels, 7);
    let (col, row) = cfg.to_pixel(Point::new(0.5, 0.0));
    let (col, row) = (col.round() as usize, row.round() as usize);
    assert!(fs.get(0, row, col) > 0.0);
    let expect = riemann_signature(&pts);
    for (c, e) in expect.iter().enumerate() {
        let got = fs.get(c + 1, row, col) as f64;
        assert!((got - e).abs() < 1e-6, "channel {}: {got} vs {e}", c + 1);
    }
    // Hand values for the L-shaped path.
    assert!((expect[3] - 1.0).abs() < 1e-9 && expect[4].abs() < 1e-9);
}
