use trus_seg::io::{load_dataset, save_dataset};
use trus_seg::phantom::{default_domains, generate_domain, PhantomDomainSpec};
use trus_seg::volume::Dataset;

fn small(spec: &PhantomDomainSpec) -> PhantomDomainSpec {
    spec.resized([6, 32, 40])
}

fn region_means(ds: &Dataset) -> (f64, f64) {
    let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for c in &ds.items {
        for (v, &l) in c.volume.voxels.iter().zip(c.mask.labels.iter()) {
            if l == 1 {
                fg += *v as f64;
                nf += 1;
            } else {
                bg += *v as f64;
                nb += 1;
            }
        }
    }
    (fg / nf as f64, bg / nb as f64)
}

fn mean(ds: &Dataset) -> f64 {
    let (s, n) = ds.items.iter().fold((0.0, 0usize), |(s, n), c| {
        (s + c.volume.voxels.iter().map(|&v| v as f64).sum::<f64>(), n + c.volume.voxels.len())
    });
    s / n as f64
}

#[test]
fn dataset_round_trips_through_disk() {
    let (a, _, _) = default_domains();
    let ds = generate_domain(&small(&a), 3, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.items.len(), 3);
    for (x, y) in ds.items.iter().zip(&back.items) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.mask, y.mask);
        assert_eq!(x.volume.voxels, y.volume.voxels);
        assert_eq!(x.volume.spacing, y.volume.spacing);
    }
}

#[test]
fn same_seed_same_data_other_seed_differs() {
    let (_, b, _) = default_domains();
    let x = generate_domain(&small(&b), 2, 4).unwrap();
    let y = generate_domain(&small(&b), 2, 4).unwrap();
    let z = generate_domain(&small(&b), 2, 5).unwrap();
    assert_eq!(x.items, y.items);
    assert_ne!(x.items[0].mask, z.items[0].mask);
}

#[test]
fn domain_shift_is_visible_in_intensities() {
    let (a, b, c) = default_domains();
    let da = generate_domain(&small(&a), 4, 1).unwrap();
    let db = generate_domain(&small(&b), 4, 1).unwrap();
    let dc = generate_domain(&small(&c), 4, 1).unwrap();
    assert!((mean(&da) - mean(&db)).abs() > 0.05 || (region_means(&da).0 - region_means(&db).0).abs() > 0.05);
    let (fa, ba) = region_means(&da);
    let (fc, bc) = region_means(&dc);
    assert!(fa < ba, "A gland darker than surroundings: {fa} vs {ba}");
    assert!(fc > bc, "C gland brighter than surroundings: {fc} vs {bc}");
}

#[test]
fn voxels_in_unit_range_and_masks_binary() {
    let (a, b, c) = default_domains();
    for spec in [a, b, c] {
        let ds = generate_domain(&small(&spec), 2, 9).unwrap();
        for case in &ds.items {
            assert!(case.volume.voxels.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(case.mask.count() > 0);
            assert_eq!(case.volume.dims(), case.mask.dims());
        }
    }
}
