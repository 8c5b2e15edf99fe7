#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn tiny_generator() -> Value {
    json!({
        "mode": "aligned",
        "num_classes": 6,
        "train_per_class": 8,
        "test_per_class": 3,
        "d": 4,
        "frames": 2,
        "cells": 2,
        "separation": 3.0,
        "noise_sigma": 0.5,
        "distractor_prob": 1.0,
        "seed": 0
    })
}

pub fn tiny_config(strategy: &str) -> Value {
    json!({
        "generator": tiny_generator(),
        "sequence": { "steps": 3, "classes_per_step": 2 },
        "train": { "strategy": strategy, "epochs": 3, "batch_size": 8, "lr": 0.01, "memory_capacity": 6 },
        "seeds": [0, 1]
    })
}

pub fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

pub fn avcil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avcil"))
        .args(args)
        .env_remove("AVCIL_OUTPUT_ROOT")
        .output()
        .unwrap()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
