use std::collections::BTreeMap;
use std::path::Path;

use super::{DatasetError, Manifest};
use crate::imaging::{grayscale, Raster};

pub const DEFAULT_DHASH_THRESHOLD: u32 = 4;

const HASH_W: usize = 9;
const HASH_H: usize = 8;

/// 64-bit difference hash.
///
/// The grayscale image is box-averaged down to 9x8 cells; bit `8 * row + col`
/// is set when cell `(row, col)` is brighter than its right neighbour.
pub fn dhash(r: &Raster) -> u64 {
    let gray = grayscale(r);
    let (w, h) = (r.width() as usize, r.height() as usize);
    let span = |i: usize, n: usize, cells: usize| {
        let lo = i * n / cells;
        let hi = ((i + 1) * n / cells).max(lo + 1).min(n);
        (lo.min(n - 1), hi)
    };
    let mut cells = [[0.0f64; HASH_W]; HASH_H];
    for (cy, row) in cells.iter_mut().enumerate() {
        let (y0, y1) = span(cy, h, HASH_H);
        for (cx, cell) in row.iter_mut().enumerate() {
            let (x0, x1) = span(cx, w, HASH_W);
            let mut acc = 0.0;
            for y in y0..y1 {
                acc += gray[y * w + x0..y * w + x1].iter().sum::<f64>();
            }
            *cell = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    let mut hash = 0u64;
    for (row_idx, row) in cells.iter().enumerate() {
        for col in 0..HASH_W - 1 {
            if row[col] > row[col + 1] {
                hash |= 1 << (row_idx * 8 + col);
            }
        }
    }
    hash
}

#[inline]
pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Groups ids whose hashes are within `threshold` bits, closing transitively.
/// Groups are sorted by id and ordered by their first id; singletons are omitted.
pub fn group_near_duplicates(hashes: &[(String, u64)], threshold: u32) -> Vec<Vec<String>> {
    let n = hashes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if hamming(hashes[i].1, hashes[j].1) <= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(hashes[i].0.clone());
    }
    let mut out: Vec<Vec<String>> = groups
        .into_values()
        .filter(|g| g.len() > 1)
        .map(|mut g| {
            g.sort();
            g
        })
        .collect();
    out.sort();
    out
}

/// dHash of every record, decoded relative to `root`.
pub fn hash_manifest(m: &Manifest, root: &Path) -> Result<Vec<(String, u64)>, DatasetError> {
    m.records
        .iter()
        .map(|r| Ok((r.id.clone(), dhash(&r.load(root)?))))
        .collect()
}

pub fn find_duplicates(
    m: &Manifest,
    root: &Path,
    threshold: u32,
) -> Result<Vec<Vec<String>>, DatasetError> {
    Ok(group_near_duplicates(&hash_manifest(m, root)?, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_lesion;
    use crate::label::Label;

    fn rotate180(r: &Raster) -> Raster {
        let (w, h) = (r.width(), r.height());
        Raster::from_fn(w, h, |x, y| r.get(w - 1 - x, h - 1 - y))
    }

    #[test]
    fn identical_copies_group() {
        let img = synthetic_lesion(1, Label::Mpox, 48);
        let h = dhash(&img);
        assert_eq!(h, dhash(&img.clone()));
        let hashes = vec![("b".to_string(), h), ("a".to_string(), h)];
        assert_eq!(
            group_near_duplicates(&hashes, 4),
            vec![vec!["a".to_string(), "b".to_string()]]
        );
    }

    #[test]
    fn rotation_changes_hash() {
        // Horizontal ramp: every left cell is darker than its right neighbour, so
        // the hash is 0; rotated by 180 degrees every comparison flips.
        let ramp = Raster::from_fn(72, 64, |x, _| [(x * 3) as u8; 3]);
        let a = dhash(&ramp);
        let b = dhash(&rotate180(&ramp));
        assert_eq!(a, 0);
        assert_eq!(b, u64::MAX);
        assert_eq!(hamming(a, b), 64);

        let img = synthetic_lesion(7, Label::Cowpox, 64);
        let (a, b) = (dhash(&img), dhash(&rotate180(&img)));
        let d = hamming(a, b);
        let groups = group_near_duplicates(&[("x".into(), a), ("y".into(), b)], 4);
        assert_eq!(groups.is_empty(), d > 4, "distance {d}");
    }

    #[test]
    fn grouping_is_transitive_and_sorted() {
        let hashes = vec![
            ("c".to_string(), 0b0000u64),
            ("a".to_string(), 0b0111u64),
            ("b".to_string(), 0b1111_1111_0000u64 << 8),
            ("d".to_string(), 0b1111_1111_0001u64 << 8),
            ("e".to_string(), 0b0011u64),
        ];
        // c~e (2 bits), e~a (1 bit) => {a, c, e}; b~d (1 bit).
        let groups = group_near_duplicates(&hashes, 2);
        assert_eq!(
            groups,
            vec![
                vec!["a".to_string(), "c".to_string(), "e".to_string()],
                vec!["b".to_string(), "d".to_string()],
            ]
        );
        assert!(group_near_duplicates(&hashes, 0).is_empty());
    }

    #[test]
    fn small_images_hash_without_panicking() {
        let tiny = Raster::from_fn(3, 2, |x, y| [(x * 80 + y) as u8; 3]);
        let _ = dhash(&tiny);
    }
}
