//! convdec: train a LeNet on MNIST, decode conv filters into image space,
//! and reproduce the reconstruction-error, activation-matrix and round-trip
//! experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use convdec::data::{
    self, export_pgm, fmt_sig, load_idx_images, load_idx_labels, normalize_dataset, tile_channels,
    write_csv, LabeledDataset,
};
use convdec::decode::{decode_all, decode_filter, save_decoded, threshold_view};
use convdec::eval::{
    activation_matrix, compare_responses, reconstruction_report, sample_indices,
};
use convdec::network::{lenet_architecture, load_model, save_model};
use convdec::synth::{
    build_synthetic_net, character_input, export_activation_atlas, round_trip, CHARACTER_NAMES,
};
use convdec::tensor::{Interp, Tensor3};
use convdec::train::{evaluate_accuracy, train, TrainConfig};

// Exit codes: 0 success, 2 usage (clap), 3 I/O, 4 validation, 5 round-trip failure.
const EXIT_IO: u8 = 3;
const EXIT_VALIDATION: u8 = 4;
const EXIT_ROUND_TRIP: u8 = 5;

#[derive(Parser)]
#[command(name = "convdec", version, about, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the LeNet on MNIST and write the model container plus a training log
    Train(TrainArgs),
    /// Decode conv filters of a trained model into image space
    Decode(DecodeArgs),
    /// Reconstruction-error report over layers and interpolation methods
    Evaluate(EvaluateArgs),
    /// 10x10 max-activation class matrix from the decoded class filters
    Confusion(ConfusionArgs),
    /// Round-trip check of the handmade synthetic network
    Roundtrip(RoundtripArgs),
    /// Side-by-side network vs decoded-filter responses for one image
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding the four MNIST IDX files
    #[arg(long)]
    mnist_dir: PathBuf,
    /// Output directory (model.cdn, training_log.csv)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.1)]
    init_std: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Train on only the first N images (0 = the full set)
    #[arg(long, default_value_t = 0)]
    limit: usize,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Conv layer ordinal to decode
    #[arg(long)]
    layer: usize,
    /// Single filter index
    #[arg(long, conflicts_with = "all")]
    filter: Option<usize>,
    /// Decode every filter of the layer
    #[arg(long)]
    all: bool,
    #[arg(long, default_value = "bicubic")]
    interp: Interp,
    /// Threshold fraction for the ternary views
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mnist_dir: PathBuf,
    /// Comma-separated conv layer ordinals
    #[arg(long, default_value = "3,5,7", value_delimiter = ',')]
    layers: Vec<usize>,
    /// nearest, bilinear, bicubic or all
    #[arg(long, default_value = "all")]
    interp: String,
    /// Test images to sample
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV report path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfusionArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mnist_dir: PathBuf,
    #[arg(long, default_value = "bicubic")]
    interp: Interp,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RoundtripArgs {
    /// nearest, bilinear, bicubic or all
    #[arg(long, default_value = "all")]
    interp: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mnist_dir: PathBuf,
    /// Index into the test split
    #[arg(long)]
    image_index: usize,
    #[arg(long, default_value = "1,3,5", value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, default_value = "bicubic")]
    interp: Interp,
    #[arg(long)]
    out: PathBuf,
}

fn parse_interps(s: &str) -> Result<Vec<Interp>> {
    if s == "all" {
        return Ok(Interp::ALL.to_vec());
    }
    Ok(vec![s.parse::<Interp>().map_err(|e| anyhow!(e))?])
}

/// Loads and normalizes both MNIST splits; the test split reuses the
/// training mean image.
fn load_mnist(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let file = |name: &str| dir.join(name);
    let train_images = load_idx_images(file("train-images-idx3-ubyte"))
        .with_context(|| format!("reading {}", file("train-images-idx3-ubyte").display()))?;
    let train_labels = load_idx_labels(file("train-labels-idx1-ubyte"))
        .with_context(|| format!("reading {}", file("train-labels-idx1-ubyte").display()))?;
    let test_images = load_idx_images(file("t10k-images-idx3-ubyte"))
        .with_context(|| format!("reading {}", file("t10k-images-idx3-ubyte").display()))?;
    let test_labels = load_idx_labels(file("t10k-labels-idx1-ubyte"))
        .with_context(|| format!("reading {}", file("t10k-labels-idx1-ubyte").display()))?;
    let train = normalize_dataset(&train_images, &train_labels, None)?;
    let test = normalize_dataset(&test_images, &test_labels, Some(&train.mean_image))?;
    Ok((train, test))
}

fn cmd_train(args: TrainArgs) -> Result<u8> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let (mut train_set, test_set) = load_mnist(&args.mnist_dir)?;
    if args.limit > 0 && args.limit < train_set.len() {
        train_set.images.truncate(args.limit);
        train_set.labels.truncate(args.limit);
    }
    println!(
        "training on {} images, evaluating on {}",
        train_set.len(),
        test_set.len()
    );

    let cfg = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        batch_size: args.batch,
        epochs: args.epochs,
        init_std: args.init_std,
        seed: args.seed,
    };
    let mut net = lenet_architecture();
    let t0 = std::time::Instant::now();
    let log = train(&mut net, &train_set, &cfg)?;
    for row in &log {
        println!(
            "epoch {:>3}  loss {:.4}  train accuracy {:.4}",
            row.epoch, row.mean_loss, row.accuracy
        );
    }
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());

    let model_path = args.out.join("model.cdn");
    save_model(&net, &model_path)?;
    let log_path = args.out.join("training_log.csv");
    write_csv(
        &log_path,
        &["epoch", "mean_loss", "train_accuracy"],
        log.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                fmt_sig(r.mean_loss, 6),
                fmt_sig(r.accuracy, 6),
            ]
        }),
    )?;

    let accuracy = evaluate_accuracy(&net, &test_set)?;
    println!("test accuracy: {accuracy:.4}");
    println!("model: {}", model_path.display());
    println!("log:   {}", log_path.display());
    Ok(0)
}

fn cmd_decode(args: DecodeArgs) -> Result<u8> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let net = load_model(&args.model)?;
    let decoded = if args.all {
        decode_all(&net, args.layer, args.interp)?
    } else {
        let index = args
            .filter
            .ok_or_else(|| anyhow!("pass --filter <index> or --all"))?;
        vec![decode_filter(&net, args.layer, index, args.interp)?]
    };

    for d in &decoded {
        let stem = format!("decoded_l{}_f{:03}_{}", d.layer, d.index, d.interp);
        save_decoded(d, args.out.join(format!("{stem}.cdf")))?;
        export_pgm(&d.plane.channel_plane(0), args.out.join(format!("{stem}.pgm")))?;
        let ternary = threshold_view(d, args.tau);
        export_pgm(
            &ternary.channel_plane(0),
            args.out.join(format!("{stem}_tau{}.pgm", args.tau)),
        )?;
    }
    let (h, w, _) = decoded[0].plane.dims();
    println!(
        "decoded {} filter(s) of layer {} ({h}x{w}, {}) into {}",
        decoded.len(),
        args.layer,
        args.interp,
        args.out.display()
    );
    Ok(0)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<u8> {
    if args.samples == 0 {
        bail!("--samples must be at least 1");
    }
    let interps = parse_interps(&args.interp)?;
    let net = load_model(&args.model)?;
    let (_, test_set) = load_mnist(&args.mnist_dir)?;
    let picked = sample_indices(test_set.len(), args.samples, args.seed);
    let images: Vec<Tensor3> = picked.iter().map(|&i| test_set.images[i].clone()).collect();

    let report = reconstruction_report(&net, &images, &args.layers, &interps)?;
    println!("layer  method    mean        std        (n = {})", images.len());
    for e in &report.entries {
        println!(
            "L{:<5} {:<9} {:<11} {:<11}",
            e.layer,
            e.interp.to_string(),
            fmt_sig(e.mean, 6),
            fmt_sig(e.std, 6)
        );
    }
    if let Some(path) = &args.out {
        write_csv(
            path,
            &["layer", "method", "mean", "std", "samples"],
            report.entries.iter().map(|e| {
                vec![
                    e.layer.to_string(),
                    e.interp.to_string(),
                    fmt_sig(e.mean, 6),
                    fmt_sig(e.std, 6),
                    e.samples.to_string(),
                ]
            }),
        )?;
        println!("report: {}", path.display());
    }
    Ok(0)
}

fn cmd_confusion(args: ConfusionArgs) -> Result<u8> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let net = load_model(&args.model)?;
    let (_, test_set) = load_mnist(&args.mnist_dir)?;
    let matrix = activation_matrix(&net, &test_set, args.interp)?;

    let header: Vec<String> = std::iter::once("filter".to_string())
        .chain((0..10).map(|c| format!("class{c}")))
        .collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(
        args.out.join("activation_matrix.csv"),
        &header_refs,
        (0..10).map(|k| {
            std::iter::once(k.to_string())
                .chain((0..10).map(|c| fmt_sig(matrix.values[k][c], 6)))
                .collect()
        }),
    )?;

    // Gallery: per row, the image holding the row maximum, plus the decoded
    // filter and its threshold view.
    let layer = *net.conv_ordinals().last().expect("conv layers");
    for (k, d) in decode_all(&net, layer, args.interp)?.iter().enumerate() {
        export_pgm(
            &d.plane.channel_plane(0),
            args.out.join(format!("filter{k}.pgm")),
        )?;
        export_pgm(
            &threshold_view(d, 0.5).channel_plane(0),
            args.out.join(format!("filter{k}_threshold.pgm")),
        )?;
        let best_class = (0..10)
            .max_by(|&a, &b| matrix.values[k][a].partial_cmp(&matrix.values[k][b]).unwrap())
            .unwrap();
        if let Some(idx) = matrix.argmax_image[k][best_class] {
            export_pgm(
                &test_set.images[idx].channel_plane(0),
                args.out.join(format!("filter{k}_top_image_class{best_class}.pgm")),
            )?;
        }
    }

    let dominance = matrix.diagonal_dominance();
    println!("diagonal dominance: {dominance}/10 rows peak on their own class");
    println!("outputs in {}", args.out.display());
    Ok(0)
}

fn cmd_roundtrip(args: RoundtripArgs) -> Result<u8> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let interps = parse_interps(&args.interp)?;
    let net = build_synthetic_net();

    let mut rows = Vec::new();
    let mut all_pass = true;
    for &interp in &interps {
        for o in round_trip(&net, interp)? {
            all_pass &= o.pass;
            println!(
                "{interp:<9} filter {} ({}) -> best {} ({})  {}",
                o.filter,
                CHARACTER_NAMES[o.filter],
                o.best,
                CHARACTER_NAMES[o.best],
                if o.pass { "pass" } else { "FAIL" }
            );
            let mut row = vec![
                interp.to_string(),
                o.filter.to_string(),
                CHARACTER_NAMES[o.filter].to_string(),
                o.best.to_string(),
                o.pass.to_string(),
            ];
            row.extend(o.responses.iter().map(|&r| fmt_sig(r, 6)));
            rows.push(row);
        }
    }
    let header: Vec<String> = ["interp", "filter", "character", "best", "pass"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..8).map(|k| format!("response_{}", CHARACTER_NAMES[k])))
        .collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(args.out.join("round_trip.csv"), &header_refs, rows)?;

    // Activation atlas for the character-C input.
    let image = character_input(&net, 0, interps[0])?;
    let paths = export_activation_atlas(&net, &image, args.out.join("atlas_C"))?;
    println!(
        "atlas: {} files under {}",
        paths.len(),
        args.out.join("atlas_C").display()
    );

    if all_pass {
        println!("round trip: 8/8 filters pass for every method");
        Ok(0)
    } else {
        println!("round trip: FAILED");
        Ok(EXIT_ROUND_TRIP)
    }
}

fn cmd_compare(args: CompareArgs) -> Result<u8> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let net = load_model(&args.model)?;
    let (_, test_set) = load_mnist(&args.mnist_dir)?;
    let image = test_set.images.get(args.image_index).ok_or_else(|| {
        anyhow!(
            "image index {} out of range ({} test images)",
            args.image_index,
            test_set.len()
        )
    })?;
    println!(
        "image {} (class {})",
        args.image_index, test_set.labels[args.image_index]
    );
    export_pgm(&image.channel_plane(0), args.out.join("input.pgm"))?;

    for pair in compare_responses(&net, image, &args.layers, args.interp)? {
        let cols = (pair.forward.channels() as f64).sqrt().ceil() as usize;
        export_pgm(
            &tile_channels(&pair.forward, cols, 1),
            args.out.join(format!("layer{}_network.pgm", pair.layer)),
        )?;
        export_pgm(
            &tile_channels(&pair.reconstructed, cols, 1),
            args.out.join(format!("layer{}_decoded.pgm", pair.layer)),
        )?;
    }
    println!("responses written to {}", args.out.display());
    Ok(0)
}

/// Maps an error chain onto the documented exit codes.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        if let Some(data) = cause.downcast_ref::<data::DataError>() {
            return match data {
                data::DataError::Io(_) => EXIT_IO,
                _ => EXIT_VALIDATION,
            };
        }
        if let Some(container) = cause.downcast_ref::<convdec::ContainerError>() {
            return match container {
                convdec::ContainerError::Io(_) => EXIT_IO,
                _ => EXIT_VALIDATION,
            };
        }
    }
    EXIT_VALIDATION
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Confusion(args) => cmd_confusion(args),
        Command::Roundtrip(args) => cmd_roundtrip(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
