//! Render one scene to a PGM file: `render_scene <ratio> <targets> <non_targets> <seed> <size> <out.pgm>`.

use quantlab::ground_truth::Combination;
use quantlab::scene::{compose_scene, rasterize};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() != 6 {
        eprintln!("usage: render_scene <ratio> <targets> <non_targets> <seed> <size> <out.pgm>");
        std::process::exit(2);
    }
    let spec = compose_scene(
        args[0].parse()?,
        Combination::new(args[1].parse()?, args[2].parse()?),
        args[3].parse()?,
    )?;
    let size: usize = args[4].parse()?;
    rasterize(&spec, size, size)?.write_pgm(args[5].as_ref())?;
    Ok(())
}
