use mixmask_web::{mask_image, mix_strip, unmix_strip, IMAGE_SIZE};

#[test]
fn mask_render_matches_lambda() {
    let (img, lambda) = mask_image(8, 0.5, "blocked", 3, 64).unwrap();
    assert_eq!((img.width, img.height), (64, 64));
    let white = img.pixels.chunks(4).filter(|p| p[0] == 255).count();
    assert_eq!(white as f64 / (64.0 * 64.0), lambda);
    assert!(mask_image(8, 0.5, "stripes", 3, 64).is_err());
    assert!(mask_image(7, 0.5, "blocked", 3, 64).is_err());
}

#[test]
fn mix_strip_is_deterministic_and_sized() {
    let a = mix_strip(4, 0.5, "blocked", "image", 1, 0, 3).unwrap();
    assert_eq!(a, mix_strip(4, 0.5, "blocked", "image", 1, 0, 3).unwrap());
    assert_eq!(a.0.width, 5 * IMAGE_SIZE + 4 * 4);
    assert_eq!(a.0.height, IMAGE_SIZE);
    assert!((a.1 - 0.5).abs() < 1e-12);
    assert!(mix_strip(4, 0.5, "blocked", "zero", 1, 0, 3).is_ok());
    assert!(mix_strip(4, 0.5, "blocked", "image", 1, 0, 10).is_err());
}

#[test]
fn unmix_strip_reports_effective_lambda() {
    let (_, g) = unmix_strip(0.3, true, 0, 1, 2).unwrap();
    assert_eq!(g, 0.3);
    let (img, l) = unmix_strip(0.75, false, 0, 1, 2).unwrap();
    // Centred box of side 32 on a 64 canvas covers a quarter.
    assert_eq!(l, 0.75);
    assert_eq!(img.width, 3 * IMAGE_SIZE + 2 * 4);
}
