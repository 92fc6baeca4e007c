/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_webdemo_free: (a: number, b: number) => void;
export const ownership_rgba: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const ownership_stats: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const webdemo_epochs_trained: (a: number) => number;
export const webdemo_height: (a: number) => number;
export const webdemo_last_segment_info: (a: number) => [number, number];
export const webdemo_new: (a: number) => number;
export const webdemo_segment: (a: number, b: number) => [number, number, number, number];
export const webdemo_test_image: (a: number) => [number, number, number, number];
export const webdemo_threshold_metrics: (a: number, b: number) => [number, number, number, number];
export const webdemo_train: (a: number, b: number, c: number) => [number, number, number];
export const webdemo_width: (a: number) => number;
export const __externref_table_alloc: () => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
