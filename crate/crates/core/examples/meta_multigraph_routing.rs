//! Threshold routing on a meta multigraph: which paths survive on each edge
//! as λ moves, and what the top-1 meta graph keeps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use disengcd::student_meta::{routing_threshold, select_paths, MetaMultigraph, Routing};

fn main() -> disengcd::Result<()> {
    let weights = [0.40, 0.25, 0.15, 0.10, 0.05, 0.03, 0.02];
    for lambda in [0.0, 0.5, 0.8, 1.0] {
        let tau = routing_threshold(&weights, lambda);
        let kept: Vec<String> = select_paths(&weights, tau)
            .iter()
            .map(|p| format!("{} {:.2}", p.path, p.weight))
            .collect();
        println!("lambda {lambda:.1}  tau {tau:.3}  kept [{}]", kept.join(", "));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mg = MetaMultigraph::random(4, 0.8, &mut rng)?;
    // sharpen the random weights so routing has something to choose between
    let sharp = mg.alpha().scale(100.0);
    mg.set_alpha(sharp)?;
    for (name, routing) in [("multigraph", Routing::Threshold), ("top-1 graph", Routing::TopOne)] {
        println!("\n{name}");
        for e in mg.route(routing).edges {
            let paths: Vec<String> = e.paths.iter().map(|p| format!("{} {:.3}", p.path, p.weight)).collect();
            println!("  H{} -> H{}  tau {:.3}  {}", e.u, e.v, e.tau, paths.join(", "));
        }
    }
    Ok(())
}
