use std::collections::VecDeque;
use std::path::Path;

use hsp_core::data::{generate_synthetic, load_batch, Split, SyntheticSpec, Task};
use hsp_core::loss_metrics::LabelMap;

fn spec(task: Task, count: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec { task, count, seed, image_size: 64, test_count: None }
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, prefix: &str, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            let name = format!("{prefix}/{}", path.file_name().unwrap().to_string_lossy());
            if path.is_dir() {
                walk(&path, &name, out);
            } else {
                out.push((name, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, "", &mut out);
    out
}

#[test]
fn generation_is_byte_deterministic() {
    for task in Task::ALL {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(a.path(), &spec(task, 6, 3)).unwrap();
        generate_synthetic(b.path(), &spec(task, 6, 3)).unwrap();
        assert_eq!(files(a.path()), files(b.path()), "{task:?}");
    }
}

#[test]
fn seeds_change_the_data() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(a.path(), &spec(Task::Blobs, 4, 1)).unwrap();
    generate_synthetic(b.path(), &spec(Task::Blobs, 4, 2)).unwrap();
    assert_ne!(files(a.path()), files(b.path()));
}

/// Count of 8-connected foreground components.
fn components(m: &LabelMap) -> usize {
    let (h, w) = (m.height as i64, m.width as i64);
    let mut seen = vec![false; m.labels.len()];
    let mut count = 0;
    for start in 0..m.labels.len() {
        if m.labels[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (y, x) = ((i as i64) / w, (i as i64) % w);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h || nx >= w {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if m.labels[j] != 0 && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    count
}

#[test]
fn instance_masks_hold_many_separate_objects() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(dir.path(), &spec(Task::Instances, 10, 5)).unwrap();
    for split in [Split::Train, Split::Test] {
        let n = ds.source.split(split).len();
        let batch = load_batch::<f32>(&ds.source, split, &(0..n).collect::<Vec<_>>()).unwrap();
        for labels in &batch.labels {
            assert!(components(labels) >= 20, "only {} instances", components(labels));
        }
    }
}

#[test]
fn every_task_has_foreground_and_background() {
    for task in Task::ALL {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(dir.path(), &spec(task, 5, 9)).unwrap();
        let n = ds.target.split(Split::Train).len();
        let batch = load_batch::<f32>(&ds.target, Split::Train, &(0..n).collect::<Vec<_>>()).unwrap();
        for labels in &batch.labels {
            let fg = labels.labels.iter().filter(|&&l| l == 1).count();
            assert!(fg > 0 && fg < labels.labels.len(), "{task:?}");
        }
    }
}

#[test]
fn target_has_lower_contrast_than_source() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(dir.path(), &spec(Task::Blobs, 6, 2)).unwrap();
    let gap = |m| {
        let b = load_batch::<f64>(m, Split::Train, &[0, 1, 2]).unwrap();
        let mut sums = [(0.0, 0.0); 2];
        for i in 0..3 {
            for (v, &l) in b.image(i).data().iter().zip(&b.labels[i].labels) {
                sums[l as usize].0 += v;
                sums[l as usize].1 += 1.0;
            }
        }
        sums[1].0 / sums[1].1 - sums[0].0 / sums[0].1
    };
    let (s, t) = (gap(&ds.source), gap(&ds.target));
    assert!(t < s && t > 0.0, "source gap {s}, target gap {t}");
}
