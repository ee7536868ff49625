/**
 * Tuner controller: slider / preset events in, display state out.
 *
 * Restore requests are debounced (trailing edge, default 200 ms) and at most
 * one is in flight; a newer request aborts the older one. A response is shown
 * only when the server's X-Alpha echo matches the request and the request
 * still matches the committed slider value, so the displayed alpha can never
 * drift from the slider. Failures raise a banner and keep the last good image.
 */

import { ApiError, DegradationMap, TunerApi } from "./api.js";
import { Debounced, debounce } from "./debounce.js";

export const ALPHA_MIN = 0;
export const ALPHA_MAX = 1.25;
export const ALPHA_STEP = 0.05;
export const DEFAULT_ALPHA = 0.75;
export const PRESET_ALPHAS = [0.75, 1.05] as const;
export const DEBOUNCE_MS = 200;

export interface DisplayedImage {
  alpha: number;
  bytes: ArrayBuffer;
}

export interface TunerState {
  imageId: string | null;
  inputImage: ArrayBuffer | null;
  committedAlpha: number;
  displayed: DisplayedImage | null;
  fullDetail: ArrayBuffer | null; // restored at alpha = 1.0 comparison pane
  degradation: DegradationMap | null;
  overlayVisible: boolean;
  banner: string | null;
  busy: boolean;
}

export class TunerController {
  readonly state: TunerState = {
    imageId: null,
    inputImage: null,
    committedAlpha: DEFAULT_ALPHA,
    displayed: null,
    fullDetail: null,
    degradation: null,
    overlayVisible: false,
    banner: null,
    busy: false,
  };

  /** Timestamps (ms) of issued restore requests; tests assert the rate budget. */
  readonly requestLog: number[] = [];

  private debouncedFetch: Debounced<[number]>;
  private inflight: AbortController | null = null;
  private listeners: Array<(s: TunerState) => void> = [];

  constructor(
    private api: TunerApi,
    private now: () => number = () => Date.now(),
    debounceMs: number = DEBOUNCE_MS,
  ) {
    this.debouncedFetch = debounce((alpha: number) => void this.fetchRestore(alpha), debounceMs);
  }

  subscribe(listener: (s: TunerState) => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const fn of this.listeners) {
      fn(this.state);
    }
  }

  static clampAlpha(alpha: number): number {
    return Math.min(Math.max(alpha, ALPHA_MIN), ALPHA_MAX);
  }

  async upload(png: ArrayBuffer): Promise<void> {
    this.state.busy = true;
    this.emit();
    try {
      const imageId = await this.api.uploadImage(png);
      this.state.imageId = imageId;
      this.state.inputImage = png;
      this.state.displayed = null;
      this.state.fullDetail = null;
      this.state.degradation = null;
      this.state.banner = null;
      this.emit();
      await Promise.all([this.fetchFullDetail(), this.fetchDegradation()]);
      await this.fetchRestore(this.state.committedAlpha);
    } catch (err) {
      this.raiseBanner(err);
    } finally {
      this.state.busy = false;
      this.emit();
    }
  }

  /** Slider input: commit the value now, fetch after the debounce settles. */
  setAlpha(alpha: number): void {
    const clamped = TunerController.clampAlpha(alpha);
    this.state.committedAlpha = clamped;
    this.emit();
    if (this.state.imageId !== null) {
      this.debouncedFetch(clamped);
    }
  }

  preset(alpha: number): void {
    this.setAlpha(alpha);
  }

  toggleOverlay(): void {
    this.state.overlayVisible = !this.state.overlayVisible;
    this.emit();
  }

  private async fetchRestore(alpha: number): Promise<void> {
    if (this.state.imageId === null) {
      return;
    }
    this.inflight?.abort(); // latest wins
    const controller = new AbortController();
    this.inflight = controller;
    this.requestLog.push(this.now());
    try {
      const result = await this.api.restore(this.state.imageId, alpha, controller.signal);
      // discard on echo mismatch or if the slider moved since this request
      if (result.echoedAlpha !== alpha || this.state.committedAlpha !== alpha) {
        return;
      }
      this.state.displayed = { alpha: result.echoedAlpha, bytes: result.bytes };
      this.state.banner = null;
      this.emit();
    } catch (err) {
      if ((err as Error).name === "AbortError") {
        return;
      }
      this.raiseBanner(err);
    } finally {
      if (this.inflight === controller) {
        this.inflight = null;
      }
    }
  }

  private async fetchFullDetail(): Promise<void> {
    if (this.state.imageId === null) {
      return;
    }
    this.requestLog.push(this.now());
    const result = await this.api.restore(this.state.imageId, 1.0);
    if (result.echoedAlpha === 1.0) {
      this.state.fullDetail = result.bytes;
      this.emit();
    }
  }

  private async fetchDegradation(): Promise<void> {
    if (this.state.imageId === null) {
      return;
    }
    this.state.degradation = await this.api.degradation(this.state.imageId);
    this.emit();
  }

  private raiseBanner(err: unknown): void {
    const detail = err instanceof ApiError ? `service error ${err.status}` : "service unreachable";
    this.state.banner = `${detail}; showing the last good image`;
    this.emit();
  }
}
