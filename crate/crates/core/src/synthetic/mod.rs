//! Procedurally rendered toy faces with ground-truth AU, identity and
//! domain-style factors.

pub mod dataset;
pub mod render;
pub mod types;

pub use dataset::{
    generate_domain_dataset, plan_split, DatasetManifest, ImageStack, LabeledSplit, SplitSpec,
    UnlabeledSplit,
};
pub use render::{landmarks, region_mask, render_face, Renderer};
pub use types::{
    AuLabels, Domain, DomainStyleSpec, FaceGeometry, FaceImage, IdentitySpec, Texture,
    ToyFaceSample, AU_NAMES,
};

use crate::error::{Error, Result};

/// Ground-truth AU swap between a source and a target sample.
///
/// Returns `(image_st, image_ts)`: the target's AUs rendered on the source
/// identity and style, and the source's AUs rendered on the target identity
/// and style. Both keep the frame seed of the face they are drawn on.
pub fn oracle_swap(
    renderer: &Renderer,
    sample_s: &ToyFaceSample,
    sample_t: &ToyFaceSample,
) -> Result<(FaceImage, FaceImage)> {
    if sample_s.domain() == sample_t.domain() {
        return Err(Error::SameDomain(sample_s.domain().to_string()));
    }
    let image_st = renderer.render(
        &sample_t.au,
        &sample_s.identity,
        &sample_s.style,
        sample_s.frame_seed,
    )?;
    let image_ts = renderer.render(
        &sample_s.au,
        &sample_t.identity,
        &sample_t.style,
        sample_t.frame_seed,
    )?;
    Ok((image_st, image_ts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample(domain: Domain, au: AuLabels, seed: u64, r: &Renderer) -> ToyFaceSample {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let identity = dataset::sample_identity(seed as u32, &mut rng);
        let style = dataset::sample_style(domain, &mut rng);
        let image = r.render(&au, &identity, &style, seed).unwrap();
        ToyFaceSample {
            image,
            au,
            identity,
            style,
            frame_seed: seed,
        }
    }

    #[test]
    fn equal_aus_swap_to_rerenders() {
        let r = Renderer::new(32, 32);
        let au = AuLabels::new(vec![1, 0, 1, 1, 0]).unwrap();
        let s = sample(Domain::Source, au.clone(), 1, &r);
        let t = sample(Domain::Target, au, 2, &r);
        let (st, ts) = oracle_swap(&r, &s, &t).unwrap();
        assert_eq!(st, s.image);
        assert_eq!(ts, t.image);
    }

    #[test]
    fn neutral_target_gives_neutral_source_face() {
        let r = Renderer::new(32, 32);
        let s = sample(Domain::Source, AuLabels::new(vec![1, 1, 1, 1, 1]).unwrap(), 3, &r);
        let t = sample(Domain::Target, AuLabels::zeros(5).unwrap(), 4, &r);
        let (st, _) = oracle_swap(&r, &s, &t).unwrap();
        let neutral = r
            .render(&AuLabels::zeros(5).unwrap(), &s.identity, &s.style, s.frame_seed)
            .unwrap();
        assert_eq!(st, neutral);
    }

    #[test]
    fn swap_differs_from_source_iff_aus_differ() {
        // Exhaustive over all 2^3 x 2^3 AU pairs at K = 3.
        let r = Renderer::new(32, 32);
        for code_s in 0..8u32 {
            for code_t in 0..8u32 {
                let s = sample(Domain::Source, AuLabels::from_code(code_s, 3).unwrap(), 5, &r);
                let t = sample(Domain::Target, AuLabels::from_code(code_t, 3).unwrap(), 6, &r);
                let (st, _) = oracle_swap(&r, &s, &t).unwrap();
                let l1 = st.mean_abs_diff(&s.image).unwrap();
                assert_eq!(l1 > 0.0, code_s != code_t, "codes {code_s} {code_t}: l1 {l1}");
            }
        }
    }

    #[test]
    fn same_domain_pair_is_rejected() {
        let r = Renderer::new(16, 16);
        let a = sample(Domain::Source, AuLabels::zeros(3).unwrap(), 1, &r);
        let b = sample(Domain::Source, AuLabels::zeros(3).unwrap(), 2, &r);
        assert!(matches!(oracle_swap(&r, &a, &b), Err(Error::SameDomain(_))));
    }
}
