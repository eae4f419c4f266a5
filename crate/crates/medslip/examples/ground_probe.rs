//! Scratch probe: compare pointing-game hit rates against the tight glyph
//! bbox and against the whole anatomy cell, and dump a few attention grids.

use medslip::checkpoint::load_checkpoint;
use medslip::eval::{checkpoint_query_embeddings, ground_for_bundle};
use medslip::metrics::{pointing_game, GtRegion};
use medslip::model::forward;
use medslip::synth::{Corpus, Split};

fn main() -> medslip::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = load_checkpoint(args[1].as_ref())?;
    let corpus = Corpus::open(args[2].as_ref())?;
    let qe = checkpoint_query_embeddings(&ckpt)?;
    let qs = &ckpt.config.query_set;
    let cfg = &corpus.manifest.config;
    let anatomy = cfg.anatomy_terms();
    let regions = corpus.regions()?;

    let mut per_path: std::collections::BTreeMap<String, (usize, usize)> = Default::default();
    let mut unique: std::collections::BTreeMap<String, (usize, usize)> = Default::default();
    let (mut bbox_hits, mut anat_cell_hits, mut shots) = (0usize, 0usize, 0usize);
    for split in [Split::Train, Split::Val, Split::Test] {
        for study_id in corpus.split_ids(split) {
            let Some(entries) = regions.get(study_id) else { continue };
            let image = corpus.image(study_id)?;
            let bundle = forward(&image, &qe, &ckpt.params, &ckpt.config.model)?;
            for entry in entries {
                let Some(pi) = qs.pathology_terms.iter().position(|t| t == &entry.pathology) else {
                    continue;
                };
                let g = ground_for_bundle(&bundle, &image, pi, 0.95)?;
                bbox_hits += usize::from(pointing_game(g.peak, GtRegion::Bbox(entry.bbox)));
                let cell = anatomy.iter().position(|a| a == &entry.anatomy).unwrap();
                let (y0, x0, y1, x1) = cfg.cell_bounds(cell);
                let hit =
                    usize::from(pointing_game(g.peak, GtRegion::Bbox([x0, y0, x1 - 1, y1 - 1])));
                anat_cell_hits += hit;
                shots += 1;
                let e = per_path.entry(entry.pathology.clone()).or_default();
                e.0 += hit;
                e.1 += 1;
                // occurrences of this pathology in this study
                let occ = entries.iter().filter(|r| r.pathology == entry.pathology).count();
                if occ == 1 {
                    let u = unique.entry(entry.pathology.clone()).or_default();
                    u.0 += hit;
                    u.1 += 1;
                }
            }
        }
    }
    println!(
        "shots {shots}: tight-bbox {:.4}, anatomy-cell {:.4}",
        bbox_hits as f64 / shots as f64,
        anat_cell_hits as f64 / shots as f64,
    );
    for (p, (h, n)) in &per_path {
        let (uh, un) = unique.get(p).copied().unwrap_or((0, 0));
        println!(
            "  {p}: cell {:.3} ({h}/{n}), unique-occurrence {:.3} ({uh}/{un})",
            *h as f64 / *n as f64,
            if un > 0 { uh as f64 / un as f64 } else { f64::NAN }
        );
    }
    Ok(())
}
