use caae_core::data::{age_to_bin, bin_to_label, denormalize_image, normalize_image, Image, ImageBatch};
use caae_core::networks::{discriminate_z, encode, generate, init_params, LatentBatch, NetworkConfig};
use caae_core::objectives::{eg_total_loss, recon_loss, tv_loss, GeneratorLoss, LossWeights};
use proptest::prelude::*;

fn batch(h: usize, w: usize, data: Vec<f64>) -> ImageBatch {
    ImageBatch::from_images(&[Image::new(h, w, 1, data).unwrap()]).unwrap()
}

fn pixels(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..=1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn binning_is_monotone(a in 0.0f64..150.0, b in 0.0f64..150.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(age_to_bin(lo).unwrap() <= age_to_bin(hi).unwrap());
    }

    #[test]
    fn labels_are_one_hot(bin in 0usize..10) {
        let v = bin_to_label(bin).unwrap().values();
        prop_assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
        prop_assert_eq!(v.iter().sum::<f64>(), -8.0);
        prop_assert_eq!(v[bin], 1.0);
    }

    #[test]
    fn eight_bit_roundtrip(raw in proptest::collection::vec(0u8..=255, 48)) {
        let vals: Vec<f64> = raw.iter().map(|&v| f64::from(v)).collect();
        let img = normalize_image(4, 4, 3, &vals).unwrap();
        prop_assert_eq!(&denormalize_image(&img).data, &raw);
    }

    #[test]
    fn recon_is_symmetric(a in pixels(16), b in pixels(16)) {
        let (x, y) = (batch(4, 4, a.clone()), batch(4, 4, b.clone()));
        let d = recon_loss(&x, &y).unwrap();
        prop_assert_eq!(d, recon_loss(&y, &x).unwrap());
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d == 0.0, a == b);
    }

    #[test]
    fn tv_ignores_offsets_and_mirroring(a in proptest::collection::vec(-0.5f64..=0.5, 20), c in -0.5f64..0.5) {
        let base = tv_loss(&batch(4, 5, a.clone())).unwrap();
        let shifted = tv_loss(&batch(4, 5, a.iter().map(|v| v + c).collect())).unwrap();
        prop_assert!((base - shifted).abs() < 1e-12);
        let mirrored = Image::new(4, 5, 1, a).unwrap().flipped();
        let m = tv_loss(&ImageBatch::from_images(&[mirrored]).unwrap()).unwrap();
        prop_assert!((base - m).abs() < 1e-12);
    }

    #[test]
    fn total_is_linear_in_weights(a in pixels(16), b in pixels(16), l in 0.0f64..200.0, g in 0.0f64..20.0,
                                  zl in -3.0f64..3.0, il in -3.0f64..3.0) {
        let (x, y) = (batch(4, 4, a), batch(4, 4, b));
        let total = |w: LossWeights| eg_total_loss(&x, &y, Some(&[zl]), Some(&[il]), &w, GeneratorLoss::NonSaturating).unwrap().0;
        let base = total(LossWeights { lambda: 0.0, gamma: 0.0 });
        let r = recon_loss(&x, &y).unwrap();
        let t = tv_loss(&y).unwrap();
        let weighted = total(LossWeights { lambda: l, gamma: g });
        prop_assert!((weighted - (base + l * r + g * t)).abs() < 1e-9);
    }
}

// Rows of E, G and Dz never interact, so permuting the batch permutes outputs.
#[test]
fn batch_rows_are_independent() {
    let cfg = NetworkConfig { image_size: 16, channels: 3, latent_dim: 6, base_filters: 8, num_scales: 2, use_batchnorm_dimg: true };
    let p = init_params(&cfg, 21).unwrap();
    let imgs: Vec<Image> = (0..3)
        .map(|k| Image::new(16, 16, 3, (0..768).map(|i| ((i * (k + 3)) % 17) as f64 / 8.5 - 1.0).collect()).unwrap())
        .collect();
    let perm = [2usize, 0, 1];
    let shuffled: Vec<Image> = perm.iter().map(|&i| imgs[i].clone()).collect();
    let z = encode(&p, &ImageBatch::from_images(&imgs).unwrap()).unwrap();
    let zs = encode(&p, &ImageBatch::from_images(&shuffled).unwrap()).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(zs.row(k), z.row(i));
    }
    let labels: Vec<_> = (0..3).map(|b| bin_to_label(b * 4).unwrap()).collect();
    let out = generate(&p, &z, &labels).unwrap();
    let rows: Vec<&[f64]> = perm.iter().map(|&i| z.row(i)).collect();
    let zp = LatentBatch::from_rows(6, &rows).unwrap();
    let lp: Vec<_> = perm.iter().map(|&i| labels[i]).collect();
    let outp = generate(&p, &zp, &lp).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(outp.image(k), out.image(i));
    }
    let d = discriminate_z(&p, &z).unwrap();
    let dp = discriminate_z(&p, &zp).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(dp.logits[k], d.logits[i]);
    }
}
