//! Reference external segmenter: answers a request file by rendering the
//! synthetic scene JSON each request points at.
//!
//! Usage: promptdep-scene-segmenter <requests.jsonl> <outdir> <height> <width>

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use promptdep::io::tensor::write_pdt1;
use promptdep::prompts::PromptBox;
use promptdep::segmenters::{synth_segment, SyntheticScene};
use serde::Deserialize;

#[derive(Deserialize)]
struct Request {
    index: usize,
    image: PathBuf,
    #[serde(rename = "box")]
    b: [f64; 4],
}

fn run(args: &[String]) -> Result<(), String> {
    let [requests, outdir, h, w] = args else {
        return Err("usage: promptdep-scene-segmenter <requests.jsonl> <outdir> <height> <width>".into());
    };
    let size = |s: &str| s.parse::<usize>().map_err(|e| format!("bad size '{s}': {e}"));
    let resolution = (size(h)?, size(w)?);
    let text = fs::read_to_string(requests).map_err(|e| format!("{requests}: {e}"))?;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let req: Request = serde_json::from_str(line).map_err(|e| format!("bad request: {e}"))?;
        let scene_text = fs::read_to_string(&req.image).map_err(|e| format!("{}: {e}", req.image.display()))?;
        let scene: SyntheticScene = serde_json::from_str(&scene_text).map_err(|e| format!("bad scene: {e}"))?;
        let b = PromptBox::new(req.b[0], req.b[1], req.b[2], req.b[3]).map_err(|e| e.to_string())?;
        let mask = synth_segment(&scene, &b, resolution);
        let data: Vec<f32> = mask.probs().iter().map(|&p| p as f32).collect();
        let path = Path::new(outdir).join(format!("mask_{}.pdt", req.index));
        write_pdt1(&path, &[resolution.0, resolution.1], &data).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
