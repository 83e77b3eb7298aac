use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use longscape::data::{
    augment_test, augment_train, batch_stream, decode_png, epoch_batch, epoch_order, load_image, resize, save_image,
    train_aug_params, Augment, BatchStream, DatasetIndex, Split,
};
use longscape_tensor::Tensor;

fn write_rgb(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    RgbImage::from_fn(w, h, |x, y| Rgb(f(x, y))).save(path).unwrap();
}

#[test]
fn two_by_two_png_decodes_to_known_values() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("px.png");
    let bytes = [[0u8, 255, 51], [102, 127, 128], [200, 1, 254], [255, 0, 0]];
    write_rgb(&p, 2, 2, |x, y| bytes[(y * 2 + x) as usize]);
    let t = load_image(&p).unwrap();
    assert_eq!(t.shape(), &[3, 2, 2]);
    for c in 0..3 {
        for px in 0..4 {
            let v = bytes[px][c] as f32 / 127.5 - 1.0;
            assert_eq!(t.data()[c * 4 + px], v);
        }
    }
    assert_eq!(t.data()[0], -1.0);
    assert_eq!(t.data()[4], 1.0);
}

#[test]
fn every_byte_survives_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    write_rgb(&a, 256, 3, |x, y| [x as u8, (x as u8).wrapping_add(y as u8 * 85), 255 - x as u8]);
    let t = load_image(&a).unwrap();
    save_image(&t, &b).unwrap();
    assert_eq!(image::open(&a).unwrap().to_rgb8(), image::open(&b).unwrap().to_rgb8());
}

#[test]
fn grayscale_is_replicated() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.png");
    ImageBuffer::from_fn(3, 2, |x, y| Luma([(x * 40 + y) as u8])).save(&p).unwrap();
    let t = load_image(&p).unwrap();
    assert_eq!(t.shape(), &[3, 2, 3]);
    assert_eq!(&t.data()[0..6], &t.data()[6..12]);
    assert_eq!(&t.data()[0..6], &t.data()[12..18]);
}

#[test]
fn sixteen_bit_and_garbage_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("deep.png");
    ImageBuffer::<Luma<u16>, _>::from_fn(2, 2, |x, _| Luma([x as u16 * 1000])).save(&p).unwrap();
    let err = load_image(&p).unwrap_err().to_string();
    assert!(err.contains("bit depth"), "{err}");
    assert!(decode_png(b"not a png").is_err());
    assert!(load_image(&dir.path().join("missing.png")).is_err());
}

#[test]
fn resize_identity_and_constant_images() {
    let t = Tensor::<f32>::rand_uniform(&[3, 16, 32], -1.0, 1.0, 1).unwrap();
    assert_eq!(resize(&t, 16, 32).unwrap(), t);
    let c = Tensor::<f32>::full(&[3, 5, 7], 0.25).unwrap();
    let r = resize(&c, 11, 3).unwrap();
    assert_eq!(r.shape(), &[3, 11, 3]);
    assert!(r.data().iter().all(|&v| (v - 0.25).abs() <= 1e-6));
    assert!(resize(&t, 0, 4).is_err());
}

#[test]
fn upsampling_by_two_interpolates_half_pixel_centres() {
    let t = Tensor::<f32>::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
    let r = resize(&t, 1, 4).unwrap();
    // centres at -0.25, 0.25, 0.75, 1.25 in source pixels, clamped at the edges
    assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn test_augmentation_shape_and_idempotence() {
    let t = Tensor::<f32>::rand_uniform(&[3, 50, 77], -1.0, 1.0, 2).unwrap();
    let once = augment_test(&t, 128).unwrap();
    assert_eq!(once.shape(), &[3, 128, 256]);
    assert_eq!(augment_test(&once, 128).unwrap(), once);
}

#[test]
fn train_augmentation_is_deterministic_and_in_range() {
    let t = Tensor::<f32>::rand_uniform(&[3, 40, 90], -1.0, 1.0, 3).unwrap();
    for seed in 0..8 {
        let a = augment_train(&t, seed, 128).unwrap();
        assert_eq!(a.shape(), &[3, 128, 256]);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a, augment_train(&t, seed, 128).unwrap());
    }
    assert!(augment_train(&t, 0, 12).is_err());
}

#[test]
fn train_crop_and_flip_distribution() {
    let (mut flips, mut tops, mut lefts) = (0, BTreeSet::new(), BTreeSet::new());
    for seed in 0..10_000 {
        let a = train_aug_params(seed, 128);
        flips += a.flip as u32;
        tops.insert(a.top);
        lefts.insert(a.left);
    }
    let freq = flips as f64 / 10_000.0;
    assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    assert_eq!(tops, (0..=16).collect());
    assert_eq!(lefts, (0..=176).collect());
}

#[test]
fn crop_offsets_pick_the_right_window() {
    // an image already at the resize target, with column index encoded in red
    let n = 8;
    let (h, w) = (9, 27);
    let data: Vec<f32> = (0..3 * h * w).map(|i| ((i % w) as f32) / 100.0).collect();
    let t = Tensor::from_vec(&[3, h, w], data).unwrap();
    for seed in 0..20 {
        let a = train_aug_params(seed, n);
        let out = augment_train(&t, seed, n).unwrap();
        let first = out.data()[0];
        let expect = if a.flip { (w - 1 - a.left) as f32 } else { a.left as f32 } / 100.0;
        assert!((first - expect).abs() <= 1e-6, "seed {seed}");
    }
}

fn dataset(n: usize) -> (tempfile::TempDir, DatasetIndex) {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    std::fs::create_dir(&train).unwrap();
    for i in 0..n {
        write_rgb(&train.join(format!("img{i:03}.png")), 12, 6, |x, y| [i as u8, x as u8 * 10, y as u8 * 20]);
    }
    std::fs::write(train.join("notes.txt"), "skip me").unwrap();
    let idx = DatasetIndex::scan(dir.path(), Split::Train).unwrap();
    (dir, idx)
}

#[test]
fn scan_sorts_pngs_and_rejects_empty_splits() {
    let (dir, idx) = dataset(5);
    assert_eq!(idx.len(), 5);
    let mut sorted = idx.files.clone();
    sorted.sort();
    assert_eq!(idx.files, sorted);
    assert!(DatasetIndex::scan(dir.path(), Split::Test).is_err());
    std::fs::create_dir(dir.path().join("test")).unwrap();
    assert!(DatasetIndex::scan(dir.path(), Split::Test).is_err());
}

#[test]
fn hundred_images_give_three_batches_of_32() {
    let files: Vec<PathBuf> = (0..100).map(|i| PathBuf::from(format!("{i}.png"))).collect();
    let idx = DatasetIndex::from_files(Path::new("."), Split::Train, files).unwrap();
    assert_eq!(idx.batches_per_epoch(32), 3);
    let order = epoch_order(100, 5);
    assert_eq!(order.iter().copied().collect::<BTreeSet<_>>().len(), 100);
    assert_eq!(order, epoch_order(100, 5));
    assert_ne!(order, epoch_order(100, 6));
}

#[test]
fn stream_covers_the_shuffled_prefix_once() {
    let (_dir, idx) = dataset(10);
    let batches: Vec<_> = batch_stream(&idx, 3, 11, Augment::Test(8)).unwrap().map(Result::unwrap).collect();
    assert_eq!(batches.len(), 3);
    let order = epoch_order(10, 11);
    let seen: Vec<PathBuf> = batches.iter().flat_map(|b| b.paths.clone()).collect();
    let expect: Vec<PathBuf> = order[..9].iter().map(|&i| idx.files[i].clone()).collect();
    assert_eq!(seen, expect);
    for b in &batches {
        assert_eq!(b.pixels.shape(), &[3, 3, 8, 16]);
    }
    let direct = epoch_batch(&idx, 3, 11, Augment::Test(8), 1).unwrap();
    assert_eq!(direct, batches[1]);
}

#[test]
fn streams_are_reproducible_and_resumable() {
    let (_dir, idx) = dataset(8);
    let run = |seed| -> Vec<_> { batch_stream(&idx, 2, seed, Augment::Train(8)).unwrap().map(Result::unwrap).collect() };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_ne!(a.iter().map(|b| b.paths.clone()).collect::<Vec<_>>(), run(2).iter().map(|b| b.paths.clone()).collect::<Vec<_>>());
    let tail: Vec<_> = BatchStream::new(&idx, 2, 1, Augment::Train(8), 2).unwrap().map(Result::unwrap).collect();
    assert_eq!(tail, a[2..]);
}

#[test]
fn dropping_a_stream_early_does_not_hang() {
    let (_dir, idx) = dataset(8);
    let mut s = batch_stream(&idx, 1, 0, Augment::Test(8)).unwrap();
    assert!(s.next().is_some());
    drop(s);
    assert!(batch_stream(&idx, 0, 0, Augment::Test(8)).is_err());
}
