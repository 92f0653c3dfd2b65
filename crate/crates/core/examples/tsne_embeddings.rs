//! Projects clustered high-dimensional vectors with t-SNE and renders an SVG scatter plot.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use voxclone::evaluation::{render_scatter, silhouette_score, tsne_project, TsneConfig};

fn main() -> voxclone::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut x, mut labels, mut names) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..5 {
        let centre: Vec<f64> = (0..64).map(|_| Normal::new(0.0, 4.0).unwrap().sample(&mut rng)).collect();
        for _ in 0..15 {
            x.push(centre.iter().map(|m| m + Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect::<Vec<f64>>());
            labels.push(c);
            names.push(format!("speaker{c}"));
        }
    }
    let out = tsne_project(&x, &TsneConfig { perplexity: 10.0, ..TsneConfig::default() })?;
    let points: Vec<Vec<f64>> = out.points.iter().map(|p| p.to_vec()).collect();
    println!("KL {:.3} -> {:.3}", out.kl_history[0], out.kl_history.last().copied().unwrap_or(f64::NAN));
    println!("silhouette {:.3}", silhouette_score(&points, &labels)?);
    let svg = std::env::temp_dir().join("voxclone-example-tsne.svg");
    let tsv = render_scatter(&out.points, &names, &svg)?;
    println!("wrote {} and {}", svg.display(), tsv.display());
    Ok(())
}
