//! Procedural images, a small concept vocabulary and matching query files for
//! tests, demos and smoke runs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Image;
use crate::datasets::{CircoQuery, SemanticAspect, Split};
use crate::error::{Error, Result};
use crate::util::stable_hash;

pub const FIXTURE_CONCEPTS: [&str; 40] = [
    "person", "animal", "sports", "vehicle", "food", "accessory", "electronic", "kitchen", "furniture", "indoor",
    "outdoor", "appliance", "dog", "cat", "horse", "bicycle", "car", "bus", "pizza", "banana", "umbrella", "laptop",
    "phone", "cup", "chair", "sofa", "bed", "clock", "vase", "kite", "surfboard", "train", "boat", "bird", "sheep",
    "giraffe", "sandwich", "oven", "television", "bench",
];

const CAPTIONS: [&str; 8] = [
    "has two of them on a sunny beach",
    "is shown from above instead of the side",
    "has no people in the background",
    "is larger and painted in bright red",
    "shows it indoors next to a window",
    "has a person holding it with both hands",
    "is at night under street lights",
    "has three more of them on the grass",
];

fn fill_rect(buf: &mut [u8], width: u32, rect: (u32, u32, u32, u32), color: [u8; 3]) {
    let (x0, y0, x1, y1) = rect;
    for y in y0..y1 {
        for x in x0..x1 {
            let i = ((y * width + x) * 3) as usize;
            buf[i..i + 3].copy_from_slice(&color);
        }
    }
}

/// A 48x48 image: a family-dependent backdrop with a few coloured blocks.
/// Images of the same `family` share their backdrop and look alike.
pub fn synthetic_image(seed: u64, family: u64, index: u64) -> Result<Image> {
    const SIDE: u32 = 48;
    let mut family_rng = ChaCha8Rng::seed_from_u64(stable_hash(seed, &[b"family", &family.to_le_bytes()]));
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(seed, &[b"image", &index.to_le_bytes()]));
    let backdrop: [u8; 3] = family_rng.random();
    let accent: [u8; 3] = family_rng.random();
    let mut buf = vec![0u8; (SIDE * SIDE * 3) as usize];
    fill_rect(&mut buf, SIDE, (0, 0, SIDE, SIDE), backdrop);
    fill_rect(&mut buf, SIDE, (0, SIDE * 2 / 3, SIDE, SIDE), accent);
    for _ in 0..rng.random_range(2..5) {
        let x0 = rng.random_range(0..SIDE - 8);
        let y0 = rng.random_range(0..SIDE - 8);
        let x1 = rng.random_range(x0 + 4..=SIDE);
        let y1 = rng.random_range(y0 + 4..=SIDE);
        fill_rect(&mut buf, SIDE, (x0, y0, x1, y1), rng.random());
    }
    Image::from_rgb(SIDE, SIDE, buf)
}

pub fn image_id(i: usize) -> String {
    format!("img{i:04}")
}

/// `n` images spread over `n / 4 + 1` visual families.
pub fn image_corpus(n: usize, seed: u64) -> Result<Vec<(String, Image)>> {
    let families = (n / 4 + 1) as u64;
    (0..n)
        .map(|i| Ok((image_id(i), synthetic_image(seed, i as u64 % families, i as u64)?)))
        .collect()
}

/// Writes the corpus as `{id}.png` files and returns the ids.
pub fn write_image_corpus(dir: &Path, n: usize, seed: u64) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    image_corpus(n, seed)?
        .into_iter()
        .map(|(id, img)| {
            img.save_png(&dir.join(format!("{id}.png")))?;
            Ok(id)
        })
        .collect()
}

pub fn write_vocabulary(path: &Path) -> Result<()> {
    let text = FIXTURE_CONCEPTS.join("\n") + "\n";
    crate::store::write_atomic(path, text.as_bytes())
}

/// CIRCO-format queries over `ids`: the reference is `ids[q]` and the ground
/// truths are the next one to three ids, cyclically.
pub fn circo_queries(ids: &[String], n_queries: usize, seed: u64) -> Result<Vec<CircoQuery>> {
    if ids.len() < 4 {
        return Err(Error::input("need at least four images to build queries"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_queries)
        .map(|q| {
            let r = q % ids.len();
            let n_gt = rng.random_range(1..=3);
            CircoQuery {
                id: q.to_string(),
                reference_img_id: ids[r].clone(),
                relative_caption: CAPTIONS[q % CAPTIONS.len()].to_string(),
                shared_concept: FIXTURE_CONCEPTS[rng.random_range(12..FIXTURE_CONCEPTS.len())].to_string(),
                gt_img_ids: (1..=n_gt).map(|o| ids[(r + o) % ids.len()].clone()).collect(),
                semantic_aspects: vec![SemanticAspect::ALL[q % SemanticAspect::ALL.len()]],
                split: if q % 5 == 0 { Split::Val } else { Split::Test },
            }
        })
        .collect())
}
