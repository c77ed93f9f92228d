// Client-side label derivation mirroring the server's aggregation semantics.
//
// The server sends raw probabilities once; moving the threshold slider only
// re-runs these pure functions over the cached response. At threshold 0.5
// the derived labels equal the server's image_level block exactly.

import type { ImageLevelPayload, RegionPayload } from "./types";

// canonical class orders; argmax ties resolve to the earliest entry,
// matching the server
export const TUMOR_SUBTYPE_CLASSES = ["malignant", "intermediate", "benign", "normal"] as const;
export const FRACTURE_CLASSES = [
  "neoplastic_pathologic_fracture",
  "non_neoplastic_fracture",
  "normal",
] as const;

export function argmaxClass(probabilities: Record<string, number>, order: readonly string[]): string {
  let best = order[0];
  let bestP = probabilities[order[0]];
  for (const name of order) {
    const p = probabilities[name];
    if (p > bestP) {
      best = name;
      bestP = p;
    }
  }
  return best;
}

export function regionIsTumor(region: RegionPayload): boolean {
  return argmaxClass(region.probabilities.tumor_subtype, TUMOR_SUBTYPE_CLASSES) !== "normal";
}

export interface DerivedLabels {
  tumor_positive: boolean;
  malignancy: "malignant" | "benign" | "none";
  max_probability_malignant: number;
  abnormality_positive: boolean;
  fracture_positive: boolean;
  implant_positive: boolean;
}

export function deriveImageLabels(regions: RegionPayload[], threshold: number): DerivedLabels {
  if (regions.length === 0) {
    throw new Error("at least one region required");
  }
  const tumorPositive = regions.some(regionIsTumor);
  const maxMalignant = Math.max(...regions.map((r) => r.probabilities.tumor_subtype["malignant"]));
  const malignancy: DerivedLabels["malignancy"] = !tumorPositive
    ? "none"
    : maxMalignant > threshold
      ? "malignant"
      : "benign";
  const abnormality = Math.max(...regions.map((r) => r.probabilities.abnormality));
  const fracture = Math.max(...regions.map((r) => 1 - r.probabilities.fracture["normal"]));
  const implant = Math.max(...regions.map((r) => r.probabilities.implant));
  return {
    tumor_positive: tumorPositive,
    malignancy,
    max_probability_malignant: maxMalignant,
    abnormality_positive: abnormality > threshold,
    fracture_positive: fracture > threshold,
    implant_positive: implant > threshold,
  };
}

export interface RegionLabels {
  tumor: boolean;
  subtype: string;
  fractureClass: string;
  abnormal: boolean;
  implant: boolean;
}

export function deriveRegionLabels(region: RegionPayload, threshold: number): RegionLabels {
  return {
    tumor: regionIsTumor(region),
    subtype: argmaxClass(region.probabilities.tumor_subtype, TUMOR_SUBTYPE_CLASSES),
    fractureClass: argmaxClass(region.probabilities.fracture, FRACTURE_CLASSES),
    abnormal: region.probabilities.abnormality > threshold,
    implant: region.probabilities.implant > threshold,
  };
}

export function labelsMatchServer(derived: DerivedLabels, server: ImageLevelPayload): boolean {
  return (
    derived.tumor_positive === server.tumor_positive &&
    derived.malignancy === server.malignancy &&
    derived.abnormality_positive === server.abnormality_positive &&
    derived.fracture_positive === server.fracture_positive &&
    derived.implant_positive === server.implant_positive &&
    derived.max_probability_malignant === server.max_probability_malignant
  );
}
