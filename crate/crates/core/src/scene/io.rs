//! Scene files: a versioned header line followed by one JSON scene per line.
//!
//! ```text
//! {"format":"scenecast-scenes","version":1}
//! {"id":0,"lanes":[{"id":0,"pts":[[x,y],...],"pred":[],"succ":[1],"left":[],"right":[]}],
//!  "agents":[{"id":0,"hist":[[x,y,yaw,v,mask],...x10],"fut":[[x,y],...x30]}],
//!  "ref":0,"tf":{"origin":[x,y],"heading":h}}
//! ```
//!
//! Units are meters, radians and m/s. `fut`, `ref` and `tf` may be omitted.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{Error, Result};

pub const SCENE_FORMAT: &str = "scenecast-scenes";
pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct FileHeader {
    pub format: String,
    pub version: u32,
}

pub fn write_header<W: Write>(mut w: W, format: &str, version: u32) -> Result<()> {
    serde_json::to_writer(&mut w, &FileHeader { format: format.to_string(), version })?;
    writeln!(w)?;
    Ok(())
}

/// Reads and checks a header line, returning the remaining lines.
pub fn read_header<R: BufRead>(r: R, format: &str, version: u32) -> Result<std::io::Lines<R>> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| Error::Format(format!("missing {format} header")))??;
    let h: FileHeader = serde_json::from_str(&first).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if h.format != format || h.version != version {
        return Err(Error::Format(format!(
            "expected {format} v{version}, found {} v{}",
            h.format, h.version
        )));
    }
    Ok(lines)
}

pub fn write_scenes<W: Write>(mut w: W, scenes: &[Scene]) -> Result<()> {
    write_header(&mut w, SCENE_FORMAT, SCENE_VERSION)?;
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_scenes<R: BufRead>(r: R) -> Result<Vec<Scene>> {
    let mut out = Vec::new();
    for (i, line) in read_header(r, SCENE_FORMAT, SCENE_VERSION)?.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Scene = serde_json::from_str(&line).map_err(|e| Error::Format(format!("scene record {}: {e}", i + 1)))?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}
