// Session state for one tab: the cached response, the threshold, and the
// selected region. Threshold changes never trigger a network call; labels are
// recomputed from the cached probabilities.

import { ApiClient } from "./api";
import { deriveImageLabels, type DerivedLabels } from "./aggregate";
import type { PredictResponse } from "./types";

export interface SessionSnapshot {
  response: PredictResponse | null;
  threshold: number;
  selectedRegion: number | null;
  labels: DerivedLabels | null;
  error: string | null;
  busy: boolean;
}

type Listener = (snapshot: SessionSnapshot) => void;

export class Session {
  private response: PredictResponse | null = null;
  private threshold = 0.5;
  private selectedRegion: number | null = null;
  private error: string | null = null;
  private busy = false;
  private listeners: Listener[] = [];
  private inflight: Promise<void> | null = null;

  constructor(private readonly api: ApiClient) {}

  subscribe(listener: Listener): void {
    this.listeners.push(listener);
  }

  snapshot(): SessionSnapshot {
    return {
      response: this.response,
      threshold: this.threshold,
      selectedRegion: this.selectedRegion,
      labels: this.response ? deriveImageLabels(this.response.regions, this.threshold) : null,
      error: this.error,
      busy: this.busy,
    };
  }

  private emit(): void {
    const snap = this.snapshot();
    for (const listener of this.listeners) {
      listener(snap);
    }
  }

  /** Upload a file and replace the session with its prediction. At most one in flight. */
  async uploadAndPredict(file: Blob, filename: string): Promise<void> {
    if (this.inflight) {
      await this.inflight;
    }
    this.busy = true;
    this.error = null;
    this.emit();
    this.inflight = (async () => {
      try {
        const response = await this.api.predict(file, filename);
        this.response = response; // prior session replaced
        this.selectedRegion = response.regions.length > 0 ? 0 : null;
      } catch (err) {
        // failed upload keeps the prior response intact
        this.error = err instanceof Error ? err.message : String(err);
      } finally {
        this.busy = false;
        this.inflight = null;
        this.emit();
      }
    })();
    await this.inflight;
  }

  /** Pure client-side recomputation; never touches the network. */
  setThreshold(threshold: number): void {
    if (threshold < 0 || threshold > 1) {
      throw new Error("threshold must be in [0, 1]");
    }
    this.threshold = threshold;
    this.emit();
  }

  selectRegion(index: number | null): void {
    if (index !== null && this.response) {
      if (index < 0 || index >= this.response.regions.length) {
        throw new Error(`region ${index} out of range`);
      }
    }
    this.selectedRegion = index;
    this.emit();
  }
}
