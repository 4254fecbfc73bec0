use sclle::error::Error;
use sclle::imageio::{BrightnessMode, Image};
use sclle::metrics::{fit_niqe, miou, niqe, psnr, ssim, ConfusionMatrix, Metric, NiqeConfig, NiqeModel};
use sclle::segmenter::{LabelMap, IGNORE_INDEX};
use sclle::synthetic::texture_image;

fn ramp(h: usize, w: usize, k: f64) -> Image<f64> {
    Image::from_fn(h, w, |y, x| {
        let t = ((y * w + x) as f64 / (h * w) as f64 * k).fract();
        [t, 1.0 - t, 0.5 * t]
    })
    .unwrap()
}

#[test]
fn psnr_is_symmetric_and_infinite_on_identity() {
    let a = ramp(12, 12, 1.0);
    let b = ramp(12, 12, 1.3);
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    assert!(psnr(&a, &a).unwrap().is_infinite());
    let black = Image::<f64>::constant(4, 4, 0.0).unwrap();
    let white = Image::<f64>::constant(4, 4, 1.0).unwrap();
    assert_eq!(psnr(&black, &white).unwrap(), 0.0);
}

#[test]
fn psnr_rejects_mismatched_sizes() {
    assert!(matches!(psnr(&ramp(4, 4, 1.0), &ramp(4, 5, 1.0)), Err(Error::Shape(_))));
}

#[test]
fn ssim_bounds_and_symmetry() {
    let a = ramp(16, 16, 1.0);
    let b = ramp(16, 16, 2.0);
    let s = ssim(&a, &b, BrightnessMode::ChannelMean).unwrap();
    assert!((-1.0..=1.0).contains(&s));
    assert_eq!(s, ssim(&b, &a, BrightnessMode::ChannelMean).unwrap());
    assert!((ssim(&a, &a, BrightnessMode::Luma601).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_needs_a_full_window() {
    assert!(ssim(&ramp(10, 16, 1.0), &ramp(10, 16, 1.0), BrightnessMode::ChannelMean).is_err());
}

fn labels(v: &[u8], s: usize) -> LabelMap {
    LabelMap::new(1, v.len(), s, v.to_vec()).unwrap()
}

#[test]
fn miou_excludes_absent_classes() {
    let r = miou(&[labels(&[0, 0, 1, 1], 3)], &[labels(&[0, 0, 1, 1], 3)], 3).unwrap();
    assert_eq!(r.mean, 1.0);
    assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
}

#[test]
fn miou_counts_unpredicted_pixels_as_misses() {
    let r = miou(&[labels(&[0, IGNORE_INDEX], 1)], &[labels(&[0, 0], 1)], 1).unwrap();
    assert_eq!(r.mean, 0.5);
}

#[test]
fn miou_skips_ignored_ground_truth() {
    let r = miou(&[labels(&[1, 0], 2)], &[labels(&[IGNORE_INDEX, 0], 2)], 2).unwrap();
    assert_eq!(r.mean, 1.0);
    assert!(matches!(
        miou(&[labels(&[0], 2)], &[labels(&[IGNORE_INDEX], 2)], 2),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn miou_pools_over_images() {
    let preds = [labels(&[0, 1], 2), labels(&[1, 1], 2)];
    let gts = [labels(&[0, 1], 2), labels(&[0, 1], 2)];
    let r = miou(&preds, &gts, 2).unwrap();
    assert!((r.mean - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);

    let mut a = ConfusionMatrix::new(2);
    a.add(&preds[0], &gts[0]).unwrap();
    let mut b = ConfusionMatrix::new(2);
    b.add(&preds[1], &gts[1]).unwrap();
    a.merge(&b);
    assert_eq!(a.miou(), Some(r.mean));
    assert_eq!(a.total(), 4);
}

#[test]
fn miou_rejects_out_of_range_labels() {
    assert!(LabelMap::new(1, 1, 2, vec![5]).is_err());
    assert!(miou(&[labels(&[5], 6)], &[labels(&[0], 6)], 2).is_err());
}

#[test]
fn metric_list_parsing() {
    let set = Metric::parse_list("psnr, miou").unwrap();
    assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![Metric::Psnr, Metric::Miou]);
    assert!(Metric::parse_list("psnr,lpips").is_err());
}

#[test]
fn niqe_model_round_trips_and_rejects_flat_images() {
    let corpus: Vec<Image<f64>> = (0..3).map(|i| texture_image(40 + i, 192, 192).unwrap()).collect();
    let model = fit_niqe(&corpus, NiqeConfig::default()).unwrap();
    assert_eq!(model.dim(), 36);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.scla");
    model.save(&path).unwrap();
    let back = NiqeModel::load(&path).unwrap();
    let probe = texture_image(77, 192, 192).unwrap();
    let (a, b) = (niqe(&probe, &model).unwrap(), niqe(&probe, &back).unwrap());
    assert!((a - b).abs() <= 1e-5 * a.abs(), "{a} vs {b}");
    let flat = Image::<f64>::constant(192, 192, 0.4).unwrap();
    assert!(matches!(niqe(&flat, &model), Err(Error::Degenerate(_))));
}
