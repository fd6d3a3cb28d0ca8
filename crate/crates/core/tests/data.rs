//! Loading, synthesis, personalization and splitting.

use tierprune::data::{load_cifar10_bin, write_cifar10_bin, CIFAR_RECORD_BYTES};
use tierprune::{personalize, split, synth_dataset, Dataset, Error, PersonalizationSpec, SynthSpec};

fn cifar_like(per_class: usize, seed: u64) -> Dataset {
    synth_dataset(&SynthSpec { num_classes: 10, per_class, image_size: 32, noise: 0.2, seed }).unwrap()
}

fn spec(kept: &[usize], cap: Option<usize>) -> PersonalizationSpec {
    PersonalizationSpec { kept_classes: kept.to_vec(), per_class_cap: cap, seed: 5 }
}

#[test]
fn cifar_file_roundtrip_through_two_batches() {
    let dir = tempfile::tempdir().unwrap();
    let data = cifar_like(3, 1);
    let (a, b) = split(&data, 0.5, 1).unwrap();
    let (pa, pb) = (dir.path().join("data_batch_1.bin"), dir.path().join("data_batch_2.bin"));
    write_cifar10_bin(&a, &pa).unwrap();
    write_cifar10_bin(&b, &pb).unwrap();
    assert_eq!(std::fs::metadata(&pa).unwrap().len() as usize, a.len() * CIFAR_RECORD_BYTES);

    let loaded = load_cifar10_bin(&[&pa, &pb]).unwrap();
    assert_eq!(loaded.len(), data.len());
    assert_eq!(&loaded.labels()[..a.len()], a.labels());
    assert_eq!(loaded.class_names().unwrap()[3], "cat");

    // once quantized, writing and reloading is bit-identical
    let again = dir.path().join("again.bin");
    write_cifar10_bin(&loaded, &again).unwrap();
    let reloaded = load_cifar10_bin(&[&again]).unwrap();
    let bits = |d: &Dataset| d.images().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&reloaded), bits(&loaded));
    assert_eq!(reloaded.labels(), loaded.labels());
    assert_eq!(std::fs::read(&again).unwrap(), [std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap()].concat());
}

#[test]
fn record_layout_is_label_then_channel_planes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.bin");
    let mut rec = vec![0u8; CIFAR_RECORD_BYTES];
    rec[0] = 6;
    rec[1] = 255; // red (0,0)
    rec[1 + 1024 + 33] = 51; // green (1,1)
    rec[1 + 2048 + 1023] = 102; // blue (31,31)
    std::fs::write(&path, &rec).unwrap();
    let d = load_cifar10_bin(&[&path]).unwrap();
    assert_eq!(d.labels(), &[6]);
    let img = d.image(0);
    assert_eq!(img[0], 1.0);
    assert_eq!(img[1024 + 33], 51.0 / 255.0);
    assert_eq!(img[2048 + 1023], 102.0 / 255.0);
    assert_eq!(img.iter().filter(|&&v| v != 0.0).count(), 3);

    std::fs::write(&path, &rec[..3072]).unwrap();
    assert!(matches!(load_cifar10_bin(&[&path]), Err(Error::Format(_))));
}

#[test]
fn personalize_two_classes_matches_a_recount() {
    let data = cifar_like(7, 2);
    let user = personalize(&data, &spec(&[8, 3], None)).unwrap();
    let want3 = data.labels().iter().filter(|&&l| l == 3).count();
    let want8 = data.labels().iter().filter(|&&l| l == 8).count();
    assert_eq!(user.len(), want3 + want8);
    assert_eq!(user.class_counts(), vec![want3, want8]);
    assert_eq!(user.num_classes(), 2);
    assert_eq!(user.label_map(), Some(&[3usize, 8][..]));
    assert_eq!(user.with_original_labels().labels().iter().filter(|&&l| l == 8).count(), want8);
    // the original is untouched
    assert_eq!(data.len(), 70);
}

#[test]
fn personalize_cap_and_identity() {
    let data = cifar_like(15, 3);
    let capped = personalize(&data, &spec(&[0, 9], Some(10))).unwrap();
    assert_eq!(capped.len(), 20);
    let all = personalize(&data, &PersonalizationSpec::all_classes(10)).unwrap();
    assert_eq!(all.labels(), data.labels());
    assert_eq!(all.images(), data.images());
    assert!(matches!(personalize(&data, &spec(&[10], None)), Err(Error::Config(_))));
}

#[test]
fn personalize_relabelling_is_order_preserving() {
    let data = cifar_like(2, 4);
    let kept = [7, 1, 4];
    let user = personalize(&data, &spec(&kept, None)).unwrap();
    let map = user.label_map().unwrap().to_vec();
    assert_eq!(map, vec![1, 4, 7]);
    for i in 0..user.len() {
        assert_eq!(map[user.labels()[i]], user.with_original_labels().labels()[i]);
    }
}

#[test]
fn split_is_a_seeded_partition() {
    let data = cifar_like(1, 5);
    let (a, b) = split(&data, 0.5, 9).unwrap();
    assert_eq!((a.len(), b.len()), (5, 5));
    let mut labels: Vec<usize> = a.labels().iter().chain(b.labels()).copied().collect();
    labels.sort();
    assert_eq!(labels, (0..10).collect::<Vec<_>>());
    let (a2, _) = split(&data, 0.5, 9).unwrap();
    assert_eq!(a2.labels(), a.labels());
    assert!(matches!(split(&data, 0.01, 9), Err(Error::Input(_))));
    assert!(matches!(split(&data, 1.0, 9), Err(Error::Config(_))));
}
