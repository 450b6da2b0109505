//! Command implementations. Each command reads and writes named artifacts in
//! one output directory so runs can be resumed, inspected, and diffed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use steamlab::analysis::{
    aggregate_lens_curves, cosine_csv, cosine_profile, lens_csv, lens_curve_pair, pca_project,
    projection_csv, TraceKind,
};
use steamlab::anchors::{build_anchor_set, filter_recalled, AnchorConfig, AnchorSet};
use steamlab::editor::{
    edit, edit_batch, estimate_covariance, load_records, request_from_case, save_records,
    EditRecord,
};
use steamlab::evalsuite::{
    aggregate_report, edit_score, evaluate_case, load_report, save_report, CaseScores,
    MetricsReport, RunMeta,
};
use steamlab::factlang::{
    build_case_suite, case_first_hops, generate_corpus, load_cases, save_cases, CaseConfig,
    EditCase, EntityId, FactCorpus,
};
use steamlab::model::{
    capture_residual_stream, load_checkpoint, save_checkpoint, train_model, ModelCheckpoint,
};
use steamlab::{fsio, Error, Result};

use crate::config::LabConfig;

/// Which editing objective to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EditVariant {
    /// Plain rank-one edits, no latent alignment.
    Baseline,
    /// Rank-one edits with the latent alignment term.
    Steam,
}

/// Artifact locations inside the output directory.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: &Path) -> OutDir {
        OutDir {
            root: root.to_path_buf(),
        }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn corpus(&self) -> PathBuf {
        self.file("corpus.json")
    }
    pub fn cases(&self) -> PathBuf {
        self.file("cases.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.file("checkpoint.bin")
    }
    pub fn train_log(&self) -> PathBuf {
        self.file("train_log.json")
    }
    pub fn edited(&self) -> PathBuf {
        self.file("edited.bin")
    }
    pub fn records(&self) -> PathBuf {
        self.file("records.json")
    }
    pub fn report_json(&self) -> PathBuf {
        self.file("report.json")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.file("report.csv")
    }
    pub fn lens_curves(&self) -> PathBuf {
        self.file("lens_curves.csv")
    }
    pub fn projections(&self) -> PathBuf {
        self.file("projections.csv")
    }
    pub fn cosines(&self) -> PathBuf {
        self.file("cosines.csv")
    }
    pub fn sweep(&self) -> PathBuf {
        self.file("sweep.csv")
    }
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "missing '{}'; run '{}' first",
            path.display(),
            produced_by
        )))
    }
}

fn load_corpus(out: &OutDir) -> Result<FactCorpus> {
    require(&out.corpus(), "train")?;
    FactCorpus::load(&out.corpus())
}

fn load_case_suite(out: &OutDir, corpus: &FactCorpus) -> Result<Vec<EditCase>> {
    require(&out.cases(), "train")?;
    load_cases(&out.cases(), corpus)
}

fn load_base(out: &OutDir) -> Result<ModelCheckpoint> {
    require(&out.checkpoint(), "train")?;
    load_checkpoint(&out.checkpoint())
}

fn load_edited(out: &OutDir) -> Result<ModelCheckpoint> {
    require(&out.edited(), "edit")?;
    load_checkpoint(&out.edited())
}

fn load_edit_records(out: &OutDir) -> Result<Vec<EditRecord>> {
    require(&out.records(), "edit")?;
    let records = load_records(&out.records())?;
    if records.is_empty() {
        return Err(Error::Edit(format!(
            "'{}' holds no edits",
            out.records().display()
        )));
    }
    Ok(records)
}

/// Applies `f` to every item on `threads` workers, preserving input order.
/// With one thread the calls run inline, so single-threaded runs stay easy
/// to step through. The first error by input order wins.
pub fn parallel_map<T, R>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
{
    let n = items.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let workers = threads.max(1).min(n);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let parts: Vec<Vec<(usize, Result<R>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break;
                        }
                        done.push((i, f(&items[i])));
                    }
                    done
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut slots: Vec<Option<Result<R>>> = Vec::with_capacity(n);
    slots.resize_with(n, || None);
    for part in parts {
        for (i, r) in part {
            slots[i] = Some(r);
        }
    }
    slots
        .into_iter()
        .map(|s| s.expect("every index was claimed"))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fsio::write_atomic(path, text.as_bytes())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fsio::write_atomic(path, &bytes)
}

pub fn cmd_train(cfg: &LabConfig, seed: u64, out: &OutDir) -> Result<()> {
    std::fs::create_dir_all(&out.root)?;
    let mut corpus_cfg = cfg.corpus.clone();
    corpus_cfg.seed = seed;
    let corpus = generate_corpus(&corpus_cfg)?;
    corpus.save(&out.corpus())?;
    println!(
        "corpus: {} entities, {} relations, {} facts, vocab {} words",
        corpus.entities.len(),
        corpus.relations.len(),
        corpus.triples.len(),
        corpus.vocab.len()
    );

    let cases = build_case_suite(
        &corpus,
        cfg.edit.cases,
        cfg.edit.min_support,
        &CaseConfig::default(),
        seed,
    )?;
    if cases.len() < cfg.edit.cases {
        eprintln!(
            "warning: built {} edit cases of {} requested; grow the corpus for more",
            cases.len(),
            cfg.edit.cases
        );
    }
    save_cases(&out.cases(), &corpus, &cases)?;

    let texts = corpus.training_sentences(&case_first_hops(&cases));
    println!(
        "training on {} sentences; multihop questions for {} cases held out",
        texts.len(),
        cases.len()
    );
    let (ckpt, log) = train_model(&corpus, &texts, &cfg.model, &cfg.train, seed)?;
    save_checkpoint(&out.checkpoint(), &ckpt)?;
    write_json(&out.train_log(), &log)?;
    println!(
        "trained {} epochs ({} steps) in {:.1}s: loss {:.4}, fact recall {:.1}%",
        ckpt.meta.epochs,
        ckpt.meta.steps,
        log.wall_seconds,
        ckpt.meta.final_loss,
        100.0 * ckpt.meta.recall
    );
    println!("checkpoint digest {}", ckpt.digest());
    Ok(())
}

/// Picks the first `want` cases whose edit target still has enough recalled
/// references under the base model, warning about each skip. Both variants
/// apply the same filter so baseline and alignment runs edit identical cases.
fn select_supported<'c>(
    base: &ModelCheckpoint,
    corpus: &FactCorpus,
    cases: &'c [EditCase],
    min_support: usize,
    want: usize,
) -> Result<Vec<&'c EditCase>> {
    let mut chosen = Vec::new();
    for case in cases {
        if chosen.len() >= want {
            break;
        }
        let refs = corpus.retrieve_references(case.new_object);
        let recalled = filter_recalled(base, corpus, &refs)?;
        if recalled.len() < min_support {
            eprintln!(
                "warning: skipping case {} ({} -> {}): target has {} recalled references, need {}",
                case.id,
                corpus.surface(case.old_object),
                corpus.surface(case.new_object),
                recalled.len(),
                min_support
            );
            continue;
        }
        chosen.push(case);
    }
    Ok(chosen)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_edit(
    cfg: &LabConfig,
    seed: u64,
    out: &OutDir,
    variant: EditVariant,
    lambda_flag: Option<f64>,
    batch: usize,
    threads: usize,
) -> Result<()> {
    if batch == 0 {
        return Err(Error::Config("--batch must be at least 1".into()));
    }
    let lambda = match variant {
        EditVariant::Baseline => {
            if let Some(l) = lambda_flag {
                if l != 0.0 {
                    return Err(Error::Config(format!(
                        "--variant baseline runs with lambda 0; drop --lambda {}",
                        l
                    )));
                }
            }
            0.0
        }
        EditVariant::Steam => lambda_flag.unwrap_or(cfg.edit.lambda),
    };

    let corpus = load_corpus(out)?;
    let cases = load_case_suite(out, &corpus)?;
    let base = load_base(out)?;

    println!(
        "estimating key covariance at layer {} from {} activations",
        cfg.edit.layer, cfg.edit.cov_samples
    );
    let cov = estimate_covariance(
        &base,
        &corpus,
        cfg.edit.layer,
        cfg.edit.cov_ridge,
        cfg.edit.cov_samples,
        seed,
    )?;

    let chosen = select_supported(&base, &corpus, &cases, cfg.edit.min_support, batch)?;
    if chosen.len() < batch {
        return Err(Error::Edit(format!(
            "requested {} edits but only {} of {} cases have enough anchor support",
            batch,
            chosen.len(),
            cases.len()
        )));
    }

    let anchor_cfg = AnchorConfig {
        max_sample: cfg.edit.anchor_sample,
        min_support: cfg.edit.min_support,
    };
    let anchors: Vec<Option<AnchorSet>> = if lambda > 0.0 {
        parallel_map(&chosen, threads, |case| {
            build_anchor_set(&base, &corpus, case.new_object, &anchor_cfg, seed).map(Some)
        })?
    } else {
        chosen.iter().map(|_| None).collect()
    };

    let mut requests = Vec::with_capacity(chosen.len());
    for (case, anchor) in chosen.iter().zip(anchors) {
        let req = request_from_case(
            &corpus,
            case,
            cfg.edit.layer,
            lambda,
            cfg.edit.band,
            &cfg.edit.opt,
            cfg.edit.prefixes,
            seed,
        );
        requests.push((req, anchor));
    }
    let mut covariances = BTreeMap::new();
    covariances.insert(cfg.edit.layer, cov);
    let (edited, records) = edit_batch(&base, &requests, &covariances)?;

    save_records(&out.records(), &records)?;
    save_checkpoint(&out.edited(), &edited)?;
    for rec in &records {
        let first = &rec.trajectory[0];
        let last = rec.trajectory.last().expect("trajectory is never empty");
        println!(
            "case {:>3}: {} {}: {} -> {} (loss {:.4} -> {:.4}, {} clamped steps)",
            rec.request.case_id,
            rec.request.subject,
            rec.request.relation_noun,
            rec.request.old_object,
            rec.request.new_object,
            first.composite,
            last.composite,
            rec.clamped_steps
        );
    }
    println!(
        "{} edits applied at layer {} (lambda {}, band {}-{})",
        records.len(),
        cfg.edit.layer,
        lambda,
        cfg.edit.band.0,
        cfg.edit.band.1
    );
    println!("edited digest {}", edited.digest());
    Ok(())
}

fn print_report(report: &MetricsReport) {
    let m = &report.meta;
    println!(
        "editor {} (lambda {}, layer {}, band {}-{}, seed {}), {} cases",
        m.editor,
        m.lambda,
        m.layer,
        m.band_start,
        m.band_end,
        m.seed,
        report.cases.len()
    );
    println!(
        "{:>5} {:>6} {:>6} {:>6} {:>6} {:>7} {:>6}",
        "case", "effi", "para", "neigh", "port", "flu", "cons"
    );
    for c in &report.cases {
        println!(
            "{:>5} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>7.3} {:>6.1}",
            c.case_id, c.efficacy, c.paraphrase, c.neighborhood, c.portability, c.fluency,
            c.consistency
        );
    }
    println!(
        "means: efficacy {:.1}, paraphrase {:.1}, neighborhood {:.1}, portability {:.1}",
        report.efficacy, report.paraphrase, report.neighborhood, report.portability
    );
    println!(
        "fluency {:.3} bits, consistency {:.1}, edit score {:.1}",
        report.fluency, report.consistency, report.edit
    );
}

pub fn cmd_eval(seed: u64, out: &OutDir, threads: usize) -> Result<()> {
    let corpus = load_corpus(out)?;
    let cases = load_case_suite(out, &corpus)?;
    let base = load_base(out)?;
    let edited = load_edited(out)?;
    let records = load_edit_records(out)?;

    let by_id: BTreeMap<u32, &EditCase> = cases.iter().map(|c| (c.id, c)).collect();
    let mut eval_cases = Vec::with_capacity(records.len());
    for rec in &records {
        let case = by_id.get(&rec.request.case_id).ok_or_else(|| {
            Error::Eval(format!(
                "record case {} is not in '{}'",
                rec.request.case_id,
                out.cases().display()
            ))
        })?;
        eval_cases.push(*case);
    }

    let first = &records[0].request;
    let meta = RunMeta {
        editor: if first.lambda > 0.0 { "steam" } else { "baseline" }.into(),
        lambda: first.lambda,
        layer: first.layer,
        band_start: first.band_start,
        band_end: first.band_end,
        seed,
    };
    let scores = parallel_map(&eval_cases, threads, |case| {
        evaluate_case(&edited, &corpus, case, seed)
    })?;
    let report = aggregate_report(meta, base.digest(), edited.digest(), scores)?;
    save_report(&out.report_json(), &report)?;
    write_text(
        &out.report_csv(),
        &format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()),
    )?;
    print_report(&report);
    println!(
        "wrote {} and {}",
        out.report_json().display(),
        out.report_csv().display()
    );
    Ok(())
}

pub fn cmd_analyze(cfg: &LabConfig, seed: u64, out: &OutDir) -> Result<()> {
    let corpus = load_corpus(out)?;
    let cases = load_case_suite(out, &corpus)?;
    let base = load_base(out)?;
    let edited = load_edited(out)?;
    let records = load_edit_records(out)?;
    let by_id: BTreeMap<u32, &EditCase> = cases.iter().map(|c| (c.id, c)).collect();

    let mut pairs = Vec::with_capacity(records.len());
    for rec in &records {
        pairs.push(lens_curve_pair(
            &edited,
            &base,
            &rec.request.prompt,
            &rec.request.new_object,
            &rec.request.old_object,
        )?);
    }
    let rows = aggregate_lens_curves(&pairs)?;
    write_text(&out.lens_curves(), &lens_csv(&rows))?;

    let mut traces = Vec::with_capacity(2 * records.len());
    let mut ids = Vec::with_capacity(2 * records.len());
    let mut kinds = Vec::with_capacity(2 * records.len());
    for rec in &records {
        let tokens = edited.tokenizer.encode(&rec.request.prompt)?;
        traces.push(capture_residual_stream(&edited, &tokens, None, false)?);
        ids.push(rec.request.case_id);
        kinds.push(TraceKind::Edited);
        traces.push(capture_residual_stream(&base, &tokens, None, false)?);
        ids.push(rec.request.case_id);
        kinds.push(TraceKind::Reference);
    }
    let proj = pca_project(&traces, cfg.analyze.dims)?;
    write_text(&out.projections(), &projection_csv(&proj, &ids, &kinds)?)?;
    let ratios: Vec<String> = proj
        .variance_ratios
        .iter()
        .map(|r| format!("{:.3}", r))
        .collect();
    println!(
        "projected {} traces to {} dims (variance ratios {})",
        traces.len(),
        cfg.analyze.dims,
        ratios.join(", ")
    );

    let anchor_cfg = AnchorConfig {
        max_sample: cfg.edit.anchor_sample,
        min_support: cfg.edit.min_support,
    };
    let mut profiles = Vec::new();
    for (idx, rec) in records.iter().enumerate() {
        let case = by_id.get(&rec.request.case_id).ok_or_else(|| {
            Error::Analysis(format!(
                "record case {} is not in '{}'",
                rec.request.case_id,
                out.cases().display()
            ))
        })?;
        let anchors = match build_anchor_set(&base, &corpus, case.new_object, &anchor_cfg, seed) {
            Ok(a) => a,
            Err(e) => {
                eprintln!(
                    "warning: no cosine profile for case {}: {}",
                    rec.request.case_id, e
                );
                continue;
            }
        };
        let id = rec.request.case_id;
        profiles.push((id, TraceKind::Edited, cosine_profile(&traces[2 * idx], &anchors)?));
        profiles.push((
            id,
            TraceKind::Reference,
            cosine_profile(&traces[2 * idx + 1], &anchors)?,
        ));
    }
    write_text(&out.cosines(), &cosine_csv(&profiles))?;
    println!(
        "wrote {}, {}, {}",
        out.lens_curves().display(),
        out.projections().display(),
        out.cosines().display()
    );
    Ok(())
}

struct SweepRow {
    lambda: f64,
    band: (usize, usize),
    efficacy: f64,
    paraphrase: f64,
    neighborhood: f64,
    portability: f64,
    edit: f64,
    fluency: f64,
    consistency: f64,
}

impl SweepRow {
    fn from_scores(lambda: f64, band: (usize, usize), scores: &[CaseScores]) -> SweepRow {
        let n = scores.len() as f64;
        let mean = |f: fn(&CaseScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        let efficacy = mean(|s| s.efficacy);
        let paraphrase = mean(|s| s.paraphrase);
        let neighborhood = mean(|s| s.neighborhood);
        let portability = mean(|s| s.portability);
        SweepRow {
            lambda,
            band,
            efficacy,
            paraphrase,
            neighborhood,
            portability,
            edit: edit_score(efficacy, paraphrase, neighborhood, portability),
            fluency: mean(|s| s.fluency),
            consistency: mean(|s| s.consistency),
        }
    }

    fn csv_header() -> &'static str {
        "lambda,band_start,band_end,effi,para,neigh,port,edit,flu,cons"
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.1},{:.1},{:.1},{:.1},{:.1},{:.3},{:.1}",
            self.lambda,
            self.band.0,
            self.band.1,
            self.efficacy,
            self.paraphrase,
            self.neighborhood,
            self.portability,
            self.edit,
            self.fluency,
            self.consistency
        )
    }

    fn table_line(&self) -> String {
        format!(
            "{:>7} {:>5} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>7.3} {:>6.1}",
            self.lambda,
            format!("{}-{}", self.band.0, self.band.1),
            self.efficacy,
            self.paraphrase,
            self.neighborhood,
            self.portability,
            self.edit,
            self.fluency,
            self.consistency
        )
    }
}

pub fn cmd_sweep(
    cfg: &LabConfig,
    seed: u64,
    out: &OutDir,
    cases_flag: Option<usize>,
    threads: usize,
) -> Result<()> {
    let limit = cases_flag.unwrap_or(cfg.sweep.cases);
    if limit == 0 {
        return Err(Error::Config("--cases must be at least 1".into()));
    }
    let corpus = load_corpus(out)?;
    let cases = load_case_suite(out, &corpus)?;
    let base = load_base(out)?;

    let eligible = select_supported(&base, &corpus, &cases, cfg.edit.min_support, limit)?;
    if eligible.is_empty() {
        return Err(Error::Edit(
            "no case has enough anchor support for the sweep".into(),
        ));
    }
    println!(
        "sweeping {} lambdas x {} bands over {} cases",
        cfg.sweep.lambdas.len(),
        cfg.sweep.bands.len(),
        eligible.len()
    );

    let cov = estimate_covariance(
        &base,
        &corpus,
        cfg.edit.layer,
        cfg.edit.cov_ridge,
        cfg.edit.cov_samples,
        seed,
    )?;
    let anchor_cfg = AnchorConfig {
        max_sample: cfg.edit.anchor_sample,
        min_support: cfg.edit.min_support,
    };
    let targets: Vec<EntityId> = {
        let set: std::collections::BTreeSet<EntityId> =
            eligible.iter().map(|c| c.new_object).collect();
        set.into_iter().collect()
    };
    let built = parallel_map(&targets, threads, |t| {
        build_anchor_set(&base, &corpus, *t, &anchor_cfg, seed)
    })?;
    let anchors: BTreeMap<EntityId, AnchorSet> = targets.into_iter().zip(built).collect();

    let mut csv = String::from(SweepRow::csv_header());
    csv.push('\n');
    println!(
        "{:>7} {:>5} {:>6} {:>6} {:>6} {:>6} {:>6} {:>7} {:>6}",
        "lambda", "band", "effi", "para", "neigh", "port", "edit", "flu", "cons"
    );
    for &lambda in &cfg.sweep.lambdas {
        for &band in &cfg.sweep.bands {
            let scores = parallel_map(&eligible, threads, |case| {
                let req = request_from_case(
                    &corpus,
                    case,
                    cfg.edit.layer,
                    lambda,
                    band,
                    &cfg.edit.opt,
                    cfg.edit.prefixes,
                    seed,
                );
                let anchor = if lambda > 0.0 {
                    Some(&anchors[&case.new_object])
                } else {
                    None
                };
                let (edited, _) = edit(&base, &req, anchor, &cov)?;
                evaluate_case(&edited, &corpus, case, seed)
            })?;
            let row = SweepRow::from_scores(lambda, band, &scores);
            csv.push_str(&row.csv_row());
            csv.push('\n');
            println!("{}", row.table_line());
        }
    }
    write_text(&out.sweep(), &csv)?;
    println!("wrote {}", out.sweep().display());
    Ok(())
}

pub fn cmd_report(out: &OutDir) -> Result<()> {
    let mut printed = false;
    if out.report_json().exists() {
        let report = load_report(&out.report_json())?;
        print_report(&report);
        printed = true;
    }
    if out.sweep().exists() {
        if printed {
            println!();
        }
        println!("sweep results:");
        let text = std::fs::read_to_string(out.sweep())?;
        for line in text.lines() {
            let padded: Vec<String> = line.split(',').map(|c| format!("{:>10}", c)).collect();
            println!("{}", padded.join(""));
        }
        printed = true;
    }
    if !printed {
        return Err(Error::Config(format!(
            "nothing to report in '{}'; run eval or sweep first",
            out.root.display()
        )));
    }
    Ok(())
}
