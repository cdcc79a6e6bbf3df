//! End-to-end exercise of the C ABI: generate a stream, run the pipeline,
//! load the resulting checkpoint, and render through the handle API.

use std::ffi::{CStr, CString};

use viewfield::config::{AtlasConfig, FieldConfig, GridConfig, RenderConfig, RunConfig};
use viewfield_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0i8; 512];
    unsafe { vf_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_string_lossy()
        .into_owned()
}

fn tiny_run_config(stream: &str, out: &str) -> RunConfig {
    RunConfig {
        seed: 11,
        stream: stream.to_string(),
        out: out.to_string(),
        train_steps_per_keyframe: 2,
        eval_interval: 5,
        holdout_every: 5,
        atlas: AtlasConfig {
            rays_per_step: 24,
            field: FieldConfig {
                grid: GridConfig {
                    levels: 3,
                    features_per_level: 2,
                    base_resolution: 4,
                    growth_factor: 1.6,
                    hash_table_size: 512,
                },
                proposal_grid: GridConfig {
                    levels: 2,
                    features_per_level: 2,
                    base_resolution: 4,
                    growth_factor: 1.6,
                    hash_table_size: 256,
                },
                geo_features: 4,
                density_hidden: vec![16],
                color_hidden: vec![16],
                proposal_hidden: vec![8],
                ..Default::default()
            },
            render: RenderConfig {
                proposal_samples: 8,
                main_samples: 6,
                ..Default::default()
            },
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn gen_run_load_render_through_c_api() {
    let dir = tempfile::tempdir().unwrap();
    let stream_dir = dir.path().join("stream");
    let out_dir = dir.path().join("run");

    // Generate a small synthetic stream.
    let status = unsafe {
        vf_gen_stream(
            c(stream_dir.to_str().unwrap()).as_ptr(),
            10,   // frames
            16,   // resolution
            3,    // seed
            0.01, // drift
            8,    // loop_close_at
            5,    // holdout_every
        )
    };
    assert_eq!(status, VfStatus::VfOk, "gen: {}", last_error());
    let stream_path = stream_dir.join("stream.jsonl");
    assert!(stream_path.exists());

    // Build a config from a TOML file (keeps the run small), then tweak it
    // through the setter API.
    let toml_path = dir.path().join("run.toml");
    let cfg_rust = tiny_run_config(stream_path.to_str().unwrap(), out_dir.to_str().unwrap());
    std::fs::write(&toml_path, cfg_rust.to_toml_string().unwrap()).unwrap();
    let cfg = unsafe { vf_config_from_toml_file(c(toml_path.to_str().unwrap()).as_ptr()) };
    assert!(!cfg.is_null(), "config load: {}", last_error());
    unsafe {
        assert_eq!(
            vf_config_set_u64(cfg, c("seed").as_ptr(), 11),
            VfStatus::VfOk
        );
        assert_eq!(
            vf_config_set_str(cfg, c("mode").as_ptr(), c("view_centric").as_ptr()),
            VfStatus::VfOk
        );
    }

    // Run the pipeline.
    let status = unsafe { vf_run(cfg) };
    assert_eq!(status, VfStatus::VfOk, "run: {}", last_error());
    unsafe { vf_config_free(cfg) };
    let checkpoint = out_dir.join("checkpoint");
    assert!(checkpoint.join("manifest.json").exists());

    // Load the checkpoint and render a view at the first keyframe pose.
    let atlas = unsafe { vf_atlas_load(c(checkpoint.to_str().unwrap()).as_ptr()) };
    assert!(!atlas.is_null(), "load: {}", last_error());
    unsafe {
        assert!(vf_atlas_model_count(atlas) >= 1);
        assert!(vf_atlas_keyframe_count(atlas) >= 8);
        let (mut w, mut h) = (0u32, 0u32);
        assert_eq!(
            vf_atlas_image_size(atlas, &mut w, &mut h),
            VfStatus::VfOk
        );
        assert_eq!((w, h), (16, 16));

        let pose = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let mut rgb = vec![0u8; (w * h * 3) as usize];
        let mut depth = vec![0.0f64; (w * h) as usize];
        assert_eq!(
            vf_atlas_render(atlas, pose.as_ptr(), 4.0, rgb.as_mut_ptr(), depth.as_mut_ptr()),
            VfStatus::VfOk,
            "render: {}",
            last_error()
        );
        // A trained field produces a non-constant image.
        assert!(rgb.iter().any(|&v| v != rgb[0]));
        assert!(depth.iter().all(|d| d.is_finite() && *d >= 0.0));
        vf_atlas_free(atlas);
    }
}

#[test]
fn error_paths_report_status_and_message() {
    unsafe {
        // Null arguments.
        assert_eq!(vf_run(std::ptr::null()), VfStatus::VfNullArgument);
        assert_eq!(
            vf_gen_stream(std::ptr::null(), 4, 8, 0, 0.0, -1, 5),
            VfStatus::VfNullArgument
        );

        // Bad config key.
        let cfg = vf_config_default();
        assert!(!cfg.is_null());
        assert_eq!(
            vf_config_set_u64(cfg, c("no_such_key").as_ptr(), 1),
            VfStatus::VfInvalidArgument
        );
        assert!(last_error().contains("no_such_key"));
        assert_eq!(
            vf_config_set_str(cfg, c("mode").as_ptr(), c("bogus").as_ptr()),
            VfStatus::VfInvalidArgument
        );

        // Running with an empty stream path is an error, not a crash.
        let status = vf_run(cfg);
        assert_ne!(status, VfStatus::VfOk);
        assert!(!last_error().is_empty());
        vf_config_free(cfg);

        // Loading a nonexistent checkpoint returns null and sets the error.
        let atlas = vf_atlas_load(c("/nonexistent/checkpoint").as_ptr());
        assert!(atlas.is_null());
        assert!(!last_error().is_empty());
        vf_atlas_free(std::ptr::null_mut()); // must be a safe no-op
    }
}

#[test]
fn version_and_error_buffer_semantics() {
    unsafe {
        let v = CStr::from_ptr(vf_version()).to_str().unwrap();
        assert!(!v.is_empty());

        // Querying the length with a null buffer, then truncation.
        vf_config_set_u64(std::ptr::null_mut(), c("seed").as_ptr(), 1);
        let len = vf_last_error(std::ptr::null_mut(), 0);
        assert!(len > 0);
        let mut small = vec![0i8; 4];
        vf_last_error(small.as_mut_ptr(), small.len());
        // Always nul-terminated.
        assert_eq!(small[3], 0);
    }
}
