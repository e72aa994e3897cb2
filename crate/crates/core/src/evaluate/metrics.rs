use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::losses::{mean_patch_ssim, IdentityEmbedder, PATCH_SIZE};
use crate::numerics::Tensor;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio for images in `[0, 1]`, in dB.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    let mse = x.mse(y);
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Mean SSIM over non-overlapping 8x8 tiles of every channel.
pub fn ssim_metric(x: &Tensor, y: &Tensor) -> Result<f64> {
    mean_patch_ssim(x, y, PATCH_SIZE, PATCH_SIZE)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Identity of the gallery entry most cosine-similar to `probe`; ties go to
/// the smallest identity so the answer is independent of gallery order.
pub fn nearest_identity(gallery: &[(u32, Vec<f64>)], probe: &[f64]) -> Result<u32> {
    let mut best: Option<(f64, u32)> = None;
    for (id, e) in gallery {
        if e.len() != probe.len() {
            return Err(Error::shape(
                "rank1",
                format!("embedding length {} vs {}", e.len(), probe.len()),
            ));
        }
        let s = cosine(e, probe);
        best = match best {
            Some((bs, bid)) if bs > s || (bs == s && bid < *id) => Some((bs, bid)),
            _ => Some((s, *id)),
        };
    }
    best.map(|(_, id)| id)
        .ok_or_else(|| Error::InvalidArgument("rank-1 needs a non-empty gallery".into()))
}

/// Percentage of probes whose nearest gallery embedding has their identity.
pub fn rank1_embeddings(gallery: &[(u32, Vec<f64>)], probes: &[(u32, Vec<f64>)]) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument(
            "rank-1 needs a non-empty gallery".into(),
        ));
    }
    let unique: BTreeSet<u32> = gallery.iter().map(|(id, _)| *id).collect();
    if unique.len() != gallery.len() {
        return Err(Error::InvalidArgument(
            "gallery identities must be unique".into(),
        ));
    }
    if probes.is_empty() {
        return Err(Error::InvalidArgument(
            "rank-1 needs at least one probe".into(),
        ));
    }
    let mut hits = 0usize;
    for (id, e) in probes {
        hits += (nearest_identity(gallery, e)? == *id) as usize;
    }
    Ok(100.0 * hits as f64 / probes.len() as f64)
}

/// Recognition feature: `p1` followed by `p2`.
pub fn embedding(embedder: &dyn IdentityEmbedder, image: &Tensor) -> Result<Vec<f64>> {
    let (p1, p2) = embedder.embed(image)?;
    let mut v = p1.into_data();
    v.extend(p2.into_data());
    Ok(v)
}

pub fn rank1(
    gallery: &[(u32, Tensor)],
    probes: &[(u32, Tensor)],
    embedder: &dyn IdentityEmbedder,
) -> Result<f64> {
    let g = gallery
        .iter()
        .map(|(id, img)| Ok((*id, embedding(embedder, img)?)))
        .collect::<Result<Vec<_>>>()?;
    let p = probes
        .iter()
        .map(|(id, img)| Ok((*id, embedding(embedder, img)?)))
        .collect::<Result<Vec<_>>>()?;
    rank1_embeddings(&g, &p)
}

/// Nested per-identity probe selections. `sets[0]` holds every qualifying
/// sample; `sets[i]` holds exactly `i` of them per identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSets {
    pub sets: Vec<BTreeMap<u32, Vec<usize>>>,
}

pub const MAX_PROBE_SET: usize = 4;

impl ProbeSets {
    pub fn p(&self, i: usize) -> &BTreeMap<u32, Vec<usize>> {
        &self.sets[i]
    }

    pub fn len(&self, i: usize) -> usize {
        self.sets[i].values().map(Vec::len).sum()
    }
}

/// Builds P0..P4 from `(identity, sample ref, yaw)` triples whose |yaw| lies
/// in `yaw_range` (inclusive). Each identity's qualifying samples are shuffled
/// by a generator keyed on `(seed, identity)` and P_i takes the first `i`.
pub fn build_probe_sets(
    pool: &[(u32, usize, i32)],
    yaw_range: (i32, i32),
    seed: u64,
) -> Result<ProbeSets> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut p0: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &(id, r, yaw) in pool {
        let entry = p0.entry(id).or_default();
        if (yaw_range.0..=yaw_range.1).contains(&yaw.abs()) {
            entry.push(r);
        }
    }
    let mut sets = vec![p0.clone()];
    let mut orders = BTreeMap::new();
    for (&id, refs) in &p0 {
        if refs.len() < MAX_PROBE_SET {
            return Err(Error::InsufficientSamples {
                identity: id,
                found: refs.len(),
                needed: MAX_PROBE_SET,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        let mut order = refs.clone();
        order.sort_unstable();
        order.shuffle(&mut rng);
        orders.insert(id, order);
    }
    for i in 1..=MAX_PROBE_SET {
        sets.push(
            orders
                .iter()
                .map(|(&id, o)| (id, o[..i].to_vec()))
                .collect(),
        );
    }
    Ok(ProbeSets { sets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::zeros(&[1, 4, 4]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        // One saturated pixel in a hundred: MSE is exactly 0.01.
        let z = Tensor::zeros(&[1, 10, 10]);
        let mut one = z.clone();
        one.data_mut()[37] = 1.0;
        assert_eq!(psnr(&z, &one).unwrap(), 20.0);
        assert_eq!(psnr(&a, &Tensor::ones(&[1, 4, 4])).unwrap(), 0.0);
        assert!(psnr(&a, &Tensor::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn ssim_metric_hand_cases() {
        let z = Tensor::zeros(&[2, 8, 8]);
        let o = Tensor::ones(&[2, 8, 8]);
        assert_eq!(ssim_metric(&o, &o).unwrap(), 1.0);
        let expected = 1e-4 / (1.0 + 1e-4);
        assert!((ssim_metric(&z, &o).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rank1_constructed_example() {
        let gallery = vec![(1, vec![1.0, 0.0]), (2, vec![0.0, 1.0])];
        assert_eq!(
            rank1_embeddings(&gallery, &[(1, vec![0.9, 0.1])]).unwrap(),
            100.0
        );
        assert_eq!(
            rank1_embeddings(&gallery, &[(2, vec![0.9, 0.1])]).unwrap(),
            0.0
        );
        assert!(rank1_embeddings(&[], &[(1, vec![1.0])]).is_err());
        assert!(rank1_embeddings(&[(1, vec![1.0]), (1, vec![2.0])], &[(1, vec![1.0])]).is_err());
    }

    #[test]
    fn probe_sets_count_and_nest() {
        let pool: Vec<(u32, usize, i32)> = (0..10u32)
            .flat_map(|id| {
                [-60, -45, -30, 30, 45, 60, 15, 0]
                    .iter()
                    .enumerate()
                    .map(move |(k, &y)| (id, id as usize * 100 + k, y))
            })
            .collect();
        let ps = build_probe_sets(&pool, (30, 60), 3).unwrap();
        assert_eq!(ps.len(0), 60);
        assert_eq!(ps.len(3), 30);
        assert_eq!(ps, build_probe_sets(&pool, (30, 60), 3).unwrap());
        let short: Vec<_> = pool
            .iter()
            .copied()
            .filter(|&(id, _, y)| id != 4 || y.abs() < 45)
            .collect();
        match build_probe_sets(&short, (30, 60), 3) {
            Err(Error::InsufficientSamples {
                identity: 4,
                found: 2,
                ..
            }) => {}
            other => panic!("{:?}", other),
        }
    }
}
