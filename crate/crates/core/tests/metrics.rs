use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use vsdnerf::imaging::Image;
use vsdnerf::latent_codec::CodecParams;
use vsdnerf::metrics::{niqe, perc_proxy, psnr};
use vsdnerf::scene_data::generate_synthetic_scene;

fn corpus() -> Vec<Image> {
    let (_, ds) = generate_synthetic_scene(7, 48, 10, 128).unwrap();
    ds.hr_images.unwrap()
}

fn noisy(img: &Image, sigma: f32, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0f32, sigma).unwrap();
    let mut out = img.clone();
    for v in &mut out.data {
        *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0);
    }
    out
}

#[test]
fn niqe_orders_noise_and_is_deterministic() {
    let images = corpus();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pure = Image::from_vec(128, 128, (0..128 * 128 * 3).map(|_| rng.random::<f32>()).collect()).unwrap();
    let pure_score = niqe(&pure).unwrap();
    for (i, img) in images.iter().enumerate() {
        let clean = niqe(img).unwrap();
        assert_eq!(clean, niqe(img).unwrap());
        let dirty = niqe(&noisy(img, 50.0 / 255.0, i as u64)).unwrap();
        println!("view {i}: clean {clean:.3} noisy {dirty:.3} pure noise {pure_score:.3}");
        assert!(dirty > clean, "view {i}: {clean} !< {dirty}");
        assert!(pure_score > clean);
    }
}

#[test]
fn perc_proxy_is_a_monotone_pseudometric() {
    let codec = CodecParams::init(5);
    let images = corpus();
    let a = &images[0];
    let b = &images[1];
    assert_eq!(perc_proxy(a, a, &codec).unwrap(), 0.0);
    assert_eq!(perc_proxy(a, b, &codec).unwrap(), perc_proxy(b, a, &codec).unwrap());
    let weak = perc_proxy(a, &noisy(a, 0.05, 1), &codec).unwrap();
    let strong = perc_proxy(a, &noisy(a, 0.2, 1), &codec).unwrap();
    assert!(strong > weak && weak > 0.0, "{weak} {strong}");
    assert!(perc_proxy(a, &Image::new(64, 64), &codec).is_err());
}

#[test]
fn psnr_is_monotone_in_noise() {
    let img = &corpus()[2];
    let mut last = f64::INFINITY;
    for sigma in [0.01, 0.03, 0.1, 0.3] {
        let p = psnr(img, &noisy(img, sigma, 9), 1.0).unwrap();
        assert!(p < last);
        last = p;
    }
}
