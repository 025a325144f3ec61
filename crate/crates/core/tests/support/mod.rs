#![allow(dead_code)]

pub mod grad_cases;
