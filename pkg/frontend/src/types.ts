// Wire types for the inference service (schema_version 1).

export interface BoxPayload {
  x: number;
  y: number;
  w: number;
  h: number;
}

export interface LocationGuess {
  name: string;
  probability: number;
}

export interface RegionProbabilities {
  abnormality: number;
  tumor_subtype: Record<string, number>;
  location: Record<string, number>;
  fracture: Record<string, number>;
  implant: number;
}

export interface RegionPayload {
  box: BoxPayload;
  location_top_k: LocationGuess[];
  probabilities: RegionProbabilities;
}

export interface ImageLevelPayload {
  tumor_positive: boolean;
  malignancy: "malignant" | "benign" | "none";
  max_probability_malignant: number;
  abnormality_positive: boolean;
  fracture_positive: boolean;
  implant_positive: boolean;
  threshold: number;
  trigger: string;
}

export interface PredictResponse {
  schema_version: string;
  image_id: string;
  model_version: string;
  regions: RegionPayload[];
  image_level: ImageLevelPayload;
}
