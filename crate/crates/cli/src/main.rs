//! `gramtex` command-line front end.
//!
//! Exit codes: 0 on success, 1 for invalid input (bad flags, unreadable or
//! malformed files, incompatible sizes), 2 for runtime or numeric failure.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gramtex::gram::{export_descriptor_vector, load_pca_bases, pca_fit, save_pca_bases};
use gramtex::weights::RescaleRecord;
use gramtex::{
    build_vgg19_spec, count_parameters, describe, gradcheck, load_descriptor, load_ppm, load_weights, postprocess,
    preprocess, random_init, save_descriptor, save_ppm, save_weights, synthesize, DescribeConfig, Error,
    FeatureTensor, LayerWeighting, LbfgsOptions, Network, NetworkSpec, PoolMode, PreprocessSpec, StatisticKind,
    SynthesisConfig, TextureDescriptor, WeightMetadata, DEFAULT_LAYERS,
};

#[derive(Parser, Debug)]
#[command(name = "gramtex", version, about = "Texture analysis and synthesis with Gram-matrix descriptors")]
struct Cli {
    /// Worker threads for the numeric kernels [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute a texture descriptor from an image
    Describe {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        stats: StatArgs,
        /// Source texture (binary PPM)
        #[arg(long)]
        source: PathBuf,
        /// Descriptor file to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a new texture from an image or a stored descriptor
    Synthesize {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        stats: StatArgs,
        #[command(flatten)]
        optim: OptimArgs,
        /// Source texture (binary PPM)
        #[arg(long, conflicts_with = "descriptor", required_unless_present = "descriptor")]
        source: Option<PathBuf>,
        /// Precomputed descriptor; layers and statistic are taken from it
        #[arg(long)]
        descriptor: Option<PathBuf>,
        /// Output width [default: source width]
        #[arg(long)]
        width: Option<usize>,
        /// Output height [default: source height]
        #[arg(long)]
        height: Option<usize>,
        /// Comma-separated loss weights, one per layer [default: all 1]
        #[arg(long, value_delimiter = ',')]
        layer_weights: Option<Vec<f64>>,
        /// Half-width of the uniform initial noise
        #[arg(long, default_value_t = 0.1)]
        noise_amplitude: f64,
        /// Accept an output size whose positions per layer differ from the descriptor's
        #[arg(long)]
        allow_size_mismatch: bool,
        /// Output image (binary PPM)
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration loss trace (CSV)
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Rescale weights so each filter's mean activation is one
    RescaleWeights {
        #[command(flatten)]
        net: NetArgs,
        /// Directory of calibration images (*.ppm)
        #[arg(long)]
        calibration_dir: PathBuf,
        /// Pooling used while measuring activations
        #[arg(long, default_value = "avg", value_parser = parse_pool)]
        pooling: PoolMode,
        /// Weight file to write (a sidecar `<out>.json` is written too)
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-layer PCA bases for the pca:K statistic
    PcaFit {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        layers: LayerArgs,
        /// Pooling used while computing activations
        #[arg(long, default_value = "avg", value_parser = parse_pool)]
        pooling: PoolMode,
        /// Directory of images (*.ppm) to fit on
        #[arg(long, conflicts_with = "source", required_unless_present = "source")]
        calibration_dir: Option<PathBuf>,
        /// Single image to fit on
        #[arg(long)]
        source: Option<PathBuf>,
        /// Number of components kept per layer
        #[arg(long)]
        k: usize,
        /// Basis file to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the number of descriptor parameters for a layer set
    CountParams {
        #[command(flatten)]
        layers: LayerArgs,
        /// Statistic: gram, pca:K or mean
        #[arg(long, default_value = "gram", value_parser = parse_statistic)]
        statistic: StatisticKind,
    },
    /// Write a descriptor's parameters as text, one value per line
    ExportFeatures {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        stats: StatArgs,
        /// Image to describe
        #[arg(long, conflicts_with = "descriptor", required_unless_present = "descriptor")]
        source: Option<PathBuf>,
        /// Existing descriptor file
        #[arg(long)]
        descriptor: Option<PathBuf>,
        /// Output file [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on a small network
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum InitWeights {
    File,
    Random,
}

#[derive(Args, Debug)]
struct NetArgs {
    /// Weight file (CNNW0001) for the VGG-19 trunk
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Load weights from --weights, or draw them at random from --seed
    #[arg(long, value_enum, default_value = "file")]
    init_weights: InitWeights,
    /// Standard deviation of random kernel taps
    #[arg(long, default_value_t = 0.05)]
    init_scale: f64,
    /// Seed for random weights and the initial noise image
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct LayerArgs {
    /// Comma-separated layer names [default: conv1_1,pool1,pool2,pool3,pool4]
    #[arg(long, value_delimiter = ',', conflicts_with = "up_to")]
    layers: Option<Vec<String>>,
    /// Use every layer up to and including this one
    #[arg(long)]
    up_to: Option<String>,
}

#[derive(Args, Debug)]
struct StatArgs {
    #[command(flatten)]
    layers: LayerArgs,
    /// Statistic: gram, pca:K or mean [default: gram]
    #[arg(long, value_parser = parse_statistic)]
    statistic: Option<StatisticKind>,
    /// Pooling in the network: avg or max
    #[arg(long, default_value = "avg", value_parser = parse_pool)]
    pooling: PoolMode,
    /// PCA bases from `pca-fit`; otherwise pca:K fits on the source itself
    #[arg(long)]
    pca_bases: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OptimArgs {
    /// Maximum L-BFGS iterations
    #[arg(long, default_value_t = LbfgsOptions::default().max_iters)]
    iters: usize,
    /// Stop when the gradient sup-norm falls to this value
    #[arg(long, default_value_t = LbfgsOptions::default().grad_tol)]
    grad_tol: f64,
    /// Stop when a step lowers the loss by less than this fraction
    #[arg(long, default_value_t = LbfgsOptions::default().rel_loss_tol)]
    rel_loss_tol: f64,
    /// Curvature pairs kept by L-BFGS
    #[arg(long, default_value_t = LbfgsOptions::default().memory)]
    memory: usize,
    /// Sufficient-decrease constant of the line search
    #[arg(long, default_value_t = LbfgsOptions::default().c1)]
    c1: f64,
    /// Curvature constant of the line search
    #[arg(long, default_value_t = LbfgsOptions::default().c2)]
    c2: f64,
}

fn parse_pool(s: &str) -> Result<PoolMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_statistic(s: &str) -> Result<StatisticKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_validation() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = Result<T, Failure>;

impl LayerArgs {
    fn resolve(&self, spec: &NetworkSpec) -> CliResult<Vec<String>> {
        let layers = match (&self.layers, &self.up_to) {
            (Some(list), _) => list.iter().map(|l| l.trim().to_string()).collect(),
            (None, Some(top)) => spec.layers_up_to(top)?,
            (None, None) => DEFAULT_LAYERS.iter().map(|l| l.to_string()).collect(),
        };
        if layers.is_empty() || layers.iter().any(|l| l.is_empty()) {
            return Err(invalid("layer list is empty or has an empty name"));
        }
        for l in &layers {
            spec.index_of(l)?;
        }
        Ok(layers)
    }
}

impl NetArgs {
    /// The network and the preprocessing its weights expect.
    fn load(&self) -> CliResult<(Network, PreprocessSpec)> {
        let spec = build_vgg19_spec();
        match self.init_weights {
            InitWeights::Random => Ok((random_init(&spec, self.seed, self.init_scale)?, PreprocessSpec::vgg())),
            InitWeights::File => {
                let path = self
                    .weights
                    .as_ref()
                    .ok_or_else(|| invalid("--weights is required unless --init-weights random is given"))?;
                let net = load_weights(path, &spec)?;
                let pre = match WeightMetadata::load_for(path)? {
                    Some(meta) => meta.preprocess_spec()?,
                    None => PreprocessSpec::vgg(),
                };
                Ok((net, pre))
            }
        }
    }
}

impl StatArgs {
    fn describe_config(&self, spec: &NetworkSpec) -> CliResult<DescribeConfig> {
        let layers = self.layers.resolve(spec)?;
        let mut config = DescribeConfig::new(&layers, self.statistic.unwrap_or(StatisticKind::Gram), self.pooling);
        if let Some(path) = &self.pca_bases {
            let StatisticKind::Pca(_) = config.statistic else {
                return Err(invalid("--pca-bases only applies to --statistic pca:K"));
            };
            let bases: HashMap<String, Arc<_>> =
                load_pca_bases(path)?.into_iter().map(|b| (b.layer.clone(), Arc::new(b))).collect();
            if let Some(missing) = layers.iter().find(|l| !bases.contains_key(*l)) {
                return Err(invalid(format!("{} has no basis for layer {missing}", path.display())));
            }
            config.pca_bases = bases;
        }
        Ok(config)
    }
}

fn load_image(path: &Path, pre: &PreprocessSpec) -> CliResult<FeatureTensor> {
    Ok(preprocess(&load_ppm(path)?, pre))
}

/// Checks that an input survives every pool below `layers`' topmost layer.
fn check_dims(spec: &NetworkSpec, layers: &[String], height: usize, width: usize) -> CliResult<()> {
    let mut top = 0;
    for l in layers {
        top = top.max(spec.index_of(l)?);
    }
    spec.check_input_dims(top, height, width).map_err(|e| {
        let step = 1usize << spec.pools_through(top);
        invalid(format!("{e}; height and width must be positive multiples of {step} for layers up to {}", spec.layers()[top].name))
    })
}

/// The `*.ppm` files of `dir`, in name order.
fn ppm_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(invalid(format!("{} contains no .ppm images", dir.display())));
    }
    Ok(files)
}

fn print_descriptor_summary(d: &TextureDescriptor) {
    for e in &d.entries {
        println!(
            "{}: {} ({} features x {} positions), {} parameters",
            e.layer,
            e.statistic.kind(),
            e.n_features,
            e.m,
            e.statistic.to_vector().len()
        );
    }
    println!("{} parameters", d.parameter_count());
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| invalid(format!("cannot configure threads: {e}")))?;
    }
    match cli.command {
        Command::Describe { net, stats, source, out } => {
            let (network, pre) = net.load()?;
            let config = stats.describe_config(network.spec())?;
            let image = load_image(&source, &pre)?;
            check_dims(network.spec(), &config.layers, image.height(), image.width())?;
            let d = describe(&network, &image, &config)?;
            save_descriptor(&d, &out)?;
            print_descriptor_summary(&d);
            Ok(())
        }
        Command::Synthesize {
            net,
            stats,
            optim,
            source,
            descriptor,
            width,
            height,
            layer_weights,
            noise_amplitude,
            allow_size_mismatch,
            out,
            trace,
        } => {
            let (network, pre) = net.load()?;
            let (target, (src_h, src_w)) = match (&source, &descriptor) {
                (Some(path), _) => {
                    let config = stats.describe_config(network.spec())?;
                    let image = load_image(path, &pre)?;
                    check_dims(network.spec(), &config.layers, image.height(), image.width())?;
                    (describe(&network, &image, &config)?, (Some(image.height()), Some(image.width())))
                }
                (None, Some(path)) => {
                    if stats.layers.layers.is_some() || stats.layers.up_to.is_some() || stats.statistic.is_some() {
                        return Err(invalid("layers and statistic come from --descriptor; do not pass them as well"));
                    }
                    (load_descriptor(path)?, (None, None))
                }
                (None, None) => return Err(invalid("either --source or --descriptor is required")),
            };
            let (Some(h), Some(w)) = (height.or(src_h), width.or(src_w)) else {
                return Err(invalid("--width and --height are required with --descriptor"));
            };
            let layers = target.layer_names();
            check_dims(network.spec(), &layers, h, w)?;

            let mut config = SynthesisConfig::new(&layers, h, w)?;
            config.statistic = target.entries[0].statistic.kind();
            config.pool_mode = stats.pooling;
            config.seed = net.seed;
            config.noise_amplitude = noise_amplitude;
            config.allow_size_mismatch = allow_size_mismatch;
            config.lbfgs = LbfgsOptions {
                memory: optim.memory,
                max_iters: optim.iters,
                grad_tol: optim.grad_tol,
                rel_loss_tol: optim.rel_loss_tol,
                c1: optim.c1,
                c2: optim.c2,
                ..LbfgsOptions::default()
            };
            if let Some(weights) = layer_weights {
                if weights.len() != layers.len() {
                    return Err(invalid(format!(
                        "{} layer weights given for {} layers",
                        weights.len(),
                        layers.len()
                    )));
                }
                config.weighting = LayerWeighting::new(layers.iter().cloned().zip(weights).collect())?;
            }

            match synthesize(&network, &target, &config) {
                Ok(result) => {
                    save_ppm(&postprocess(&result.image, &pre)?, &out)?;
                    if let Some(path) = &trace {
                        result.trace.write_csv(path)?;
                    }
                    let termination = result.trace.termination.map(|t| t.to_string()).unwrap_or_default();
                    println!(
                        "final loss {:.6e} after {} iterations ({termination})",
                        result.trace.final_loss().unwrap_or(f64::NAN),
                        result.trace.iterations()
                    );
                    Ok(())
                }
                Err(failure) => {
                    // Keep whatever progress was made before reporting.
                    if let (Some(path), Some(t)) = (&trace, &failure.trace) {
                        t.write_csv(path)?;
                    }
                    if let Some(image) = &failure.image {
                        save_ppm(&postprocess(image, &pre)?, &out)?;
                    }
                    Err(failure.error.into())
                }
            }
        }
        Command::RescaleWeights {
            net,
            calibration_dir,
            pooling,
            out,
        } => {
            let (network, pre) = net.load()?;
            let files = ppm_files(&calibration_dir)?;
            let last = &network.spec().layers().last().expect("spec has layers").name;
            let mut images = Vec::with_capacity(files.len());
            for f in &files {
                let img = load_image(f, &pre)?;
                check_dims(network.spec(), std::slice::from_ref(last), img.height(), img.width())?;
                images.push(img);
            }
            let scaled = network.rescale_weights(&images, pooling)?;
            save_weights(&scaled, &out)?;
            let mut meta = match (&net.weights, net.init_weights) {
                (Some(path), InitWeights::File) => WeightMetadata::load_for(path)?.unwrap_or_default(),
                _ => WeightMetadata::default(),
            };
            meta.rescale_calibration = Some(RescaleRecord {
                calibration_dir: calibration_dir.display().to_string(),
                images: files
                    .iter()
                    .map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
                    .collect(),
                pooling: pooling.to_string(),
            });
            meta.save_for(&out)?;
            println!("rescaled {} conv layers on {} images", network.spec().conv_layers().count(), files.len());
            Ok(())
        }
        Command::PcaFit {
            net,
            layers,
            pooling,
            calibration_dir,
            source,
            k,
            out,
        } => {
            let (network, pre) = net.load()?;
            let layers = layers.resolve(network.spec())?;
            let files = match (&calibration_dir, &source) {
                (Some(dir), _) => ppm_files(dir)?,
                (None, Some(path)) => vec![path.clone()],
                (None, None) => return Err(invalid("either --calibration-dir or --source is required")),
            };
            let mut top = layers[0].clone();
            for l in &layers {
                if network.spec().index_of(l)? > network.spec().index_of(&top)? {
                    top = l.clone();
                }
            }
            let mut samples: HashMap<&str, Vec<FeatureTensor>> = HashMap::new();
            for f in &files {
                let img = load_image(f, &pre)?;
                check_dims(network.spec(), &layers, img.height(), img.width())?;
                let acts = network.forward(&img, &top, pooling)?;
                for l in &layers {
                    samples.entry(l).or_default().push(acts.get(l).expect("captured").clone());
                }
            }
            let mut bases = Vec::with_capacity(layers.len());
            for l in &layers {
                let basis = pca_fit(l, &samples[l.as_str()], k)?;
                println!("{l}: {k} of {} components", basis.n_features());
                bases.push(basis);
            }
            save_pca_bases(&bases, &out)?;
            Ok(())
        }
        Command::CountParams { layers, statistic } => {
            let spec = build_vgg19_spec();
            let layers = layers.resolve(&spec)?;
            println!("{}", count_parameters(&spec, statistic, &layers)?);
            Ok(())
        }
        Command::ExportFeatures {
            net,
            stats,
            source,
            descriptor,
            out,
        } => {
            let d = match (&source, &descriptor) {
                (Some(path), _) => {
                    let (network, pre) = net.load()?;
                    let config = stats.describe_config(network.spec())?;
                    let image = load_image(path, &pre)?;
                    check_dims(network.spec(), &config.layers, image.height(), image.width())?;
                    describe(&network, &image, &config)?
                }
                (None, Some(path)) => load_descriptor(path)?,
                (None, None) => return Err(invalid("either --source or --descriptor is required")),
            };
            let mut text = String::new();
            for v in export_descriptor_vector(&d) {
                writeln!(text, "{v:e}").expect("writing to a string");
            }
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| invalid(format!("{}: {e}", path.display())))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let outcomes = gradcheck::run_suite(seed)?;
            let mut failed = 0;
            for o in &outcomes {
                let status = if o.passed() { "ok" } else { "FAILED" };
                println!(
                    "{status:6} {} ({} coordinates): max relative error {:.2e}, tolerance {:.0e}",
                    o.name, o.coordinates, o.max_rel_error, o.tolerance
                );
                if !o.passed() {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Failure {
                    code: 2,
                    message: format!("{failed} of {} gradient checks failed", outcomes.len()),
                });
            }
            println!("all {} checks passed", outcomes.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
