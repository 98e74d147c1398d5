//! `synth` and `preprocess`.

use hyperfm::group::BandProfile;
use hyperfm::Result;
use hyperfm_datapipe::pipeline::{self, PreprocessConfig, MANIFEST_FILE};
use hyperfm_datapipe::synth::{synth_granules, write_granules, SynthConfig};
use hyperfm_datapipe::tiles::ExtractOptions;

use crate::manifest::{RunManifest, RUN_MANIFEST};
use crate::{PreprocessArgs, SynthArgs};

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_pairs: a.n,
        cloud_fraction: a.cloud_fraction,
        height: a.height,
        width: a.width,
        bands: a
            .bands
            .map(|[blue, red, swir]| BandProfile { blue, red, swir })
            .unwrap_or(BandProfile::PACE),
        flag_fraction: a.flag_fraction,
        ..SynthConfig::default()
    };
    let pairs = synth_granules(&cfg)?;
    write_granules(&a.out, &pairs)?;
    RunManifest::new("synth", cfg.seed, &cfg)?.write(&a.out.join(RUN_MANIFEST))?;
    println!("wrote {} granule pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let cfg = PreprocessConfig {
        extract: ExtractOptions {
            window: a.window,
            stride: a.stride.unwrap_or(a.window),
            t_nan: a.t_nan,
            nan_scope: a.nan_scope,
        },
        delta_t: a.delta_t,
    };
    let r = pipeline::preprocess(&a.l1b_dir, &a.l2_dir, &a.out, &cfg)?;
    RunManifest::new("preprocess", 0, &cfg)?
        .inputs(&pipeline::list_granules(&a.l1b_dir)?)?
        .inputs(&pipeline::list_granules(&a.l2_dir)?)?
        .write(&a.out.join(RUN_MANIFEST))?;
    println!("pairs\t{}", r.pairs);
    println!("kept\t{}", r.kept);
    println!("discarded\t{}", r.discarded);
    println!("unmatched_l1b\t{}\t{}", r.unmatched_l1b.len(), r.unmatched_l1b.join(","));
    println!("unmatched_l2\t{}\t{}", r.unmatched_l2.len(), r.unmatched_l2.join(","));
    println!("manifest\t{}\tsha256 {}", a.out.join(MANIFEST_FILE).display(), r.manifest_sha256);
    Ok(())
}
