/* tslint:disable */
/* eslint-disable */

export class WebDemo {
    free(): void;
    [Symbol.dispose](): void;
    epochs_trained(): number;
    height(): number;
    last_segment_info(): string;
    constructor(seed: number);
    /**
     * Overlay RGBA bytes; `last_segment_info` has the counts.
     */
    segment(stride: number): Uint8Array;
    test_image(): Uint8Array;
    threshold_metrics(threshold: number): string;
    train(epochs: number, stride: number): number;
    width(): number;
}

/**
 * Ownership map as `h·w·4` RGBA bytes.
 */
export function ownership_rgba(h: number, w: number, stride: number, patch_size: number, sliding: boolean): Uint8Array;

/**
 * `{"patches": …, "overlap_pixels": …}` of the same map.
 */
export function ownership_stats(h: number, w: number, stride: number, patch_size: number, sliding: boolean): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_webdemo_free: (a: number, b: number) => void;
    readonly ownership_rgba: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly ownership_stats: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly webdemo_epochs_trained: (a: number) => number;
    readonly webdemo_height: (a: number) => number;
    readonly webdemo_last_segment_info: (a: number) => [number, number];
    readonly webdemo_new: (a: number) => number;
    readonly webdemo_segment: (a: number, b: number) => [number, number, number, number];
    readonly webdemo_test_image: (a: number) => [number, number, number, number];
    readonly webdemo_threshold_metrics: (a: number, b: number) => [number, number, number, number];
    readonly webdemo_train: (a: number, b: number, c: number) => [number, number, number];
    readonly webdemo_width: (a: number) => number;
    readonly __externref_table_alloc: () => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
