use std::fs;
use std::io::Read;
use std::path::Path;

use ctlearn_core::data::{parse_idx_images, parse_idx_labels};
use flate2::read::GzDecoder;

pub const DEFAULT_BASE_URL: &str = "https://storage.googleapis.com/cvdf-datasets/mnist";

const FILES: [(&str, bool); 4] = [
    ("train-images-idx3-ubyte", true),
    ("train-labels-idx1-ubyte", false),
    ("t10k-images-idx3-ubyte", true),
    ("t10k-labels-idx1-ubyte", false),
];

/// Downloads the gzipped IDX files, checks that they parse and writes them
/// uncompressed into `out`.
pub fn fetch_mnist(base_url: &str, out: &Path) -> Result<(), String> {
    let client = reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_secs(120))
        .build()
        .map_err(|e| e.to_string())?;
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    for (name, images) in FILES {
        let url = format!("{}/{name}.gz", base_url.trim_end_matches('/'));
        log::info!("downloading {url}");
        let resp = client.get(&url).send().and_then(|r| r.error_for_status()).map_err(|e| format!("{url}: {e}"))?;
        let gz = resp.bytes().map_err(|e| format!("{url}: {e}"))?;
        let mut raw = Vec::new();
        GzDecoder::new(&gz[..]).read_to_end(&mut raw).map_err(|e| format!("{url}: not gzip: {e}"))?;
        let check = if images { parse_idx_images(&raw).map(|_| ()) } else { parse_idx_labels(&raw).map(|_| ()) };
        check.map_err(|e| format!("{url}: {e}"))?;
        let path = out.join(name);
        fs::write(&path, raw).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(())
}
