//! Scene directories: `map.bin`, `poses.csv`, `camera.txt` and
//! `frames/<id>.ppm`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use poet_core::geometry::{CameraIntrinsics, Pose7D};
use poet_core::maprender::{io, PointMap, RgbImage};
use poet_core::pipeline::{Dataset, Frame};

use crate::files::{create_dir, write_atomic};

pub const POSES_HEADER: &str = "frame_id,tx,ty,tz,qw,qx,qy,qz";

pub fn frame_id(i: usize) -> String {
    format!("{i:06}")
}

pub fn write_poses(poses: &[(String, Pose7D)], out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{POSES_HEADER}")?;
    for (id, p) in poses {
        let v = p.to_vector();
        writeln!(
            out,
            "{id},{},{},{},{},{},{},{}",
            v[0], v[1], v[2], v[3], v[4], v[5], v[6]
        )?;
    }
    Ok(())
}

pub fn read_poses(input: impl BufRead) -> Result<Vec<(String, Pose7D)>> {
    let mut lines = input.lines();
    let header = lines.next().context("empty poses file")??;
    ensure!(
        header.trim() == POSES_HEADER,
        "unexpected poses header {header:?}"
    );
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        ensure!(cols.len() == 8, "poses line {}: expected 8 columns", n + 2);
        let v: Vec<f64> = cols[1..]
            .iter()
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("poses line {}", n + 2))?;
        out.push((
            cols[0].to_string(),
            Pose7D::from_vector(v.try_into().expect("seven columns"))?,
        ));
    }
    Ok(out)
}

pub fn write_camera(k: &CameraIntrinsics, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "width = {}\nheight = {}", k.width, k.height)?;
    writeln!(
        out,
        "fx = {}\nfy = {}\ncx = {}\ncy = {}",
        k.fx, k.fy, k.cx, k.cy
    )?;
    Ok(())
}

pub fn read_camera(text: &str) -> Result<CameraIntrinsics> {
    let get = |key: &str| -> Result<f64> {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                if k.trim() == key {
                    return v.trim().parse().with_context(|| format!("camera {key}"));
                }
            }
        }
        bail!("camera file lacks {key}")
    };
    let (w, h) = (get("width")?, get("height")?);
    ensure!(
        w >= 1.0 && h >= 1.0 && w.fract() == 0.0 && h.fract() == 0.0,
        "bad camera size {w}x{h}"
    );
    Ok(CameraIntrinsics::new(
        get("fx")?,
        get("fy")?,
        get("cx")?,
        get("cy")?,
        w as usize,
        h as usize,
    )?)
}

pub struct Scene {
    pub map: PointMap,
    pub intrinsics: CameraIntrinsics,
    pub ids: Vec<String>,
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(&dir.join("frames"))?;
        write_atomic(&dir.join("map.bin"), |w| {
            Ok(io::write_point_map(&self.map, w)?)
        })?;
        write_atomic(&dir.join("camera.txt"), |w| {
            write_camera(&self.intrinsics, w)
        })?;
        let poses: Vec<(String, Pose7D)> = self
            .ids
            .iter()
            .cloned()
            .zip(self.frames.iter().map(|f| f.pose))
            .collect();
        write_atomic(&dir.join("poses.csv"), |w| write_poses(&poses, w))?;
        for (id, f) in self.ids.iter().zip(&self.frames) {
            write_atomic(&dir.join("frames").join(format!("{id}.ppm")), |w| {
                Ok(io::write_ppm(&f.image, w)?)
            })?;
        }
        Ok(())
    }

    /// Loads the frames whose index falls in `span` (all when `None`).
    pub fn read(dir: &Path, span: Option<std::ops::Range<usize>>) -> Result<Self> {
        ensure!(
            dir.is_dir(),
            "scene directory {} does not exist",
            dir.display()
        );
        let open = |name: &str| {
            let p = dir.join(name);
            fs::File::open(&p).with_context(|| format!("cannot open {}", p.display()))
        };
        let map =
            io::read_point_map(BufReader::new(open("map.bin")?)).context("reading map.bin")?;
        let camera = fs::read_to_string(dir.join("camera.txt")).context("reading camera.txt")?;
        let intrinsics = read_camera(&camera)?;
        let mut poses = read_poses(BufReader::new(open("poses.csv")?))?;
        if let Some(span) = span {
            ensure!(
                span.end <= poses.len(),
                "frames {span:?} out of range for a scene with {} frames",
                poses.len()
            );
            poses = poses[span].to_vec();
        }
        let mut ids = Vec::with_capacity(poses.len());
        let mut frames = Vec::with_capacity(poses.len());
        for (id, pose) in poses {
            let image: RgbImage = io::read_ppm(BufReader::new(open(&format!("frames/{id}.ppm"))?))
                .with_context(|| format!("reading frame {id}"))?;
            ensure!(
                (image.width, image.height) == (intrinsics.width, intrinsics.height),
                "frame {id} is {}x{}, camera is {}x{}",
                image.width,
                image.height,
                intrinsics.width,
                intrinsics.height
            );
            ids.push(id);
            frames.push(Frame { image, pose });
        }
        Ok(Scene {
            map,
            intrinsics,
            ids,
            frames,
        })
    }

    pub fn into_dataset(self) -> (Vec<String>, Dataset) {
        (
            self.ids,
            Dataset {
                map: self.map,
                intrinsics: self.intrinsics,
                frames: self.frames,
            },
        )
    }
}
