// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;

use crate::voxel_grid::VoxelCoord;

pub const TAPS: usize = 27;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SparseConvKind {
    /// Output sites equal input sites, stride 1.
    Submanifold,
    /// 3x3x3 kernel, stride 2, padding 1.
    Strided,
}

/// Gather/scatter plan of one sparse 3x3x3 convolution. Tap `k = a*9 + b*3
/// + c` is the kernel offset `(a-1, b-1, c-1)` along `(x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rulebook {
    pub kind: SparseConvKind,
    pub in_len: usize,
    pub out_coords: Vec<VoxelCoord>,
    pub out_shape: [usize; 3],
    /// Per tap, `(input index, output index)` pairs.
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

pub fn tap_offset(k: usize) -> [i64; 3] {
    [(k / 9) as i64 - 1, ((k / 3) % 3) as i64 - 1, (k % 3) as i64 - 1]
}

fn index_of(coords: &[VoxelCoord]) -> HashMap<VoxelCoord, u32> {
    coords.iter().enumerate().map(|(i, c)| (*c, i as u32)).collect()
}

fn shifted(c: &VoxelCoord, d: [i64; 3], shape: [usize; 3]) -> Option<VoxelCoord> {
    let p = [c.x as i64 + d[0], c.y as i64 + d[1], c.z as i64 + d[2]];
    for i in 0..3 {
        if p[i] < 0 || p[i] >= shape[i] as i64 {
            return None;
        }
    }
    Some(VoxelCoord::new(c.b, p[0] as u32, p[1] as u32, p[2] as u32))
}

/// Build the rulebook for sorted, unique `coords` on a grid of
/// `spatial_shape`.
pub fn build_rulebook(coords: &[VoxelCoord], spatial_shape: [usize; 3], kind: SparseConvKind) -> Rulebook {
    let mut pairs = vec![Vec::new(); TAPS];
    match kind {
        SparseConvKind::Submanifold => {
            let index = index_of(coords);
            for (o, c) in coords.iter().enumerate() {
                for (k, tap) in pairs.iter_mut().enumerate() {
                    if let Some(n) = shifted(c, tap_offset(k), spatial_shape) {
                        if let Some(&i) = index.get(&n) {
                            tap.push((i, o as u32));
                        }
                    }
                }
            }
            Rulebook {
                kind,
                in_len: coords.len(),
                out_coords: coords.to_vec(),
                out_shape: spatial_shape,
                pairs,
            }
        }
        SparseConvKind::Strided => {
            let out_shape = spatial_shape.map(|d| d.div_ceil(2));
            // output o receives input i = 2 o + k - 1 per axis
            let mut raw: Vec<(usize, u32, VoxelCoord)> = Vec::new();
            for (i, c) in coords.iter().enumerate() {
                for k in 0..TAPS {
                    let t = [k / 9, (k / 3) % 3, k % 3];
                    let p = [c.x as i64, c.y as i64, c.z as i64];
                    let mut o = [0u32; 3];
                    let mut ok = true;
                    for a in 0..3 {
                        let num = p[a] - t[a] as i64 + 1;
                        if num < 0 || num % 2 != 0 || num / 2 >= out_shape[a] as i64 {
                            ok = false;
                            break;
                        }
                        o[a] = (num / 2) as u32;
                    }
                    if ok {
                        raw.push((k, i as u32, VoxelCoord::new(c.b, o[0], o[1], o[2])));
                    }
                }
            }
            let mut out_coords: Vec<VoxelCoord> = raw.iter().map(|r| r.2).collect();
            out_coords.sort_unstable();
            out_coords.dedup();
            let index = index_of(&out_coords);
            for (k, i, oc) in raw {
                pairs[k].push((i, index[&oc]));
            }
            Rulebook {
                kind,
                in_len: coords.len(),
                out_coords,
                out_shape,
                pairs,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn c(x: u32, y: u32, z: u32) -> VoxelCoord {
        VoxelCoord::new(0, x, y, z)
    }

    #[test]
    fn isolated_voxel_center_tap_only() {
        let rb = build_rulebook(&[c(3, 3, 3)], [8, 8, 8], SparseConvKind::Submanifold);
        assert_eq!(rb.pair_count(), 1);
        assert_eq!(rb.pairs[13], vec![(0, 0)]);
    }

    #[test]
    fn adjacent_pair_has_four_pairs() {
        let rb = build_rulebook(&[c(3, 3, 3), c(4, 3, 3)], [8, 8, 8], SparseConvKind::Submanifold);
        assert_eq!(rb.pair_count(), 4);
        // output 0 reads its +x neighbour through tap (2,1,1) = 22
        assert_eq!(rb.pairs[22], vec![(1, 0)]);
        assert_eq!(rb.pairs[4], vec![(0, 1)]);
        assert_eq!(rb.out_coords, vec![c(3, 3, 3), c(4, 3, 3)]);
    }

    #[test]
    fn strided_matches_dense_footprint() {
        // dense oracle: output o is active iff some tap k puts 2 o + k - 1 on
        // the active input voxel
        let n = 16;
        let input = c(5, 5, 5);
        let rb = build_rulebook(&[input], [n, n, n], SparseConvKind::Strided);
        let mut dense = BTreeSet::new();
        for ox in 0..n / 2 {
            for oy in 0..n / 2 {
                for oz in 0..n / 2 {
                    for k in 0..27 {
                        let d = tap_offset(k);
                        let src = [2 * ox as i64 + d[0], 2 * oy as i64 + d[1], 2 * oz as i64 + d[2]];
                        if src == [5, 5, 5] {
                            dense.insert(c(ox as u32, oy as u32, oz as u32));
                        }
                    }
                }
            }
        }
        assert_eq!(rb.out_coords.iter().copied().collect::<BTreeSet<_>>(), dense);
        assert_eq!(rb.out_coords.len(), 8);
        assert!(rb.out_coords.iter().all(|o| (2..=3).contains(&o.x)));
        assert_eq!(rb.out_shape, [8, 8, 8]);
    }

    #[test]
    fn odd_shapes_use_ceiling() {
        let rb = build_rulebook(&[c(4, 0, 2)], [5, 3, 3], SparseConvKind::Strided);
        assert_eq!(rb.out_shape, [3, 2, 2]);
        assert!(rb.out_coords.contains(&c(2, 0, 1)));
    }

    #[test]
    fn batches_do_not_mix() {
        let coords = [VoxelCoord::new(0, 1, 1, 1), VoxelCoord::new(1, 1, 1, 2)];
        let rb = build_rulebook(&coords, [4, 4, 4], SparseConvKind::Submanifold);
        assert_eq!(rb.pair_count(), 2);
        let rb = build_rulebook(&coords, [4, 4, 4], SparseConvKind::Strided);
        assert!(rb.out_coords.iter().any(|o| o.b == 1));
        for tap in &rb.pairs {
            for &(i, o) in tap {
                assert_eq!(coords[i as usize].b, rb.out_coords[o as usize].b);
            }
        }
    }
}
