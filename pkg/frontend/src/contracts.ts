/**
 * Wire contracts of the session service. Every payload entering or leaving
 * the UI is validated against these schemas; nothing is posted or rendered
 * from unvalidated data.
 */

import { z } from "zod";

const vec3 = z.tuple([z.number(), z.number(), z.number()]);

export const FramePayloadSchema = z
  .object({
    t: z.number().int().nonnegative(),
    points: z.array(vec3).nonempty(),
    pred_xm: z.array(z.number().int()),
    pred_2d: z.array(z.number().int()),
    pred_3d: z.array(z.number().int()),
    gt: z.array(z.number().int()),
    ent_2d: z.array(z.number()),
    ent_3d: z.array(z.number()),
    pose: z.array(z.number()).length(16),
    classes: z.array(z.string()).min(2),
  })
  .refine(
    (f) =>
      [f.pred_xm, f.pred_2d, f.pred_3d, f.gt, f.ent_2d, f.ent_3d].every(
        (a) => a.length === f.points.length,
      ),
    { message: "per-point arrays must match the point count" },
  );

export type FramePayload = z.infer<typeof FramePayloadSchema>;

export const MetricsSnapshotSchema = z.object({
  t: z.number().int(),
  miou_xm: z.number().nullable(),
  miou_2d: z.number().nullable(),
  miou_3d: z.number().nullable(),
  per_class_iou: z.array(z.number().nullable()),
  prompts_consumed: z.number().int().nonnegative(),
  prompts_human: z.number().int().nonnegative(),
  frames_per_second: z.number(),
  done: z.boolean().optional(),
  error: z.string().optional(),
});

export type MetricsSnapshot = z.infer<typeof MetricsSnapshotSchema>;

export const StreamEventSchema = z.object({
  t: z.number().int(),
  metrics: MetricsSnapshotSchema,
});

export type StreamEvent = z.infer<typeof StreamEventSchema>;

export const PromptPayloadSchema = z.object({
  t: z.number().int().nonnegative(),
  class_id: z.number().int().nonnegative(),
  point_indices: z.array(z.number().int().nonnegative()).nonempty(),
  box: z
    .object({ min: vec3, max: vec3 })
    .nullable(),
  client_id: z.string(),
});

export type PromptPayload = z.infer<typeof PromptPayloadSchema>;

export const PromptResponseSchema = z.object({
  accepted: z.boolean(),
  applied_at_t: z.number().int().nullable(),
});

export type PromptResponse = z.infer<typeof PromptResponseSchema>;

export type ParseOutcome<T> =
  | { ok: true; value: T }
  | { ok: false; error: string };

export function parseFrame(raw: unknown): ParseOutcome<FramePayload> {
  const r = FramePayloadSchema.safeParse(raw);
  return r.success
    ? { ok: true, value: r.data }
    : { ok: false, error: r.error.issues[0]?.message ?? "invalid frame" };
}

export function parseEvent(raw: unknown): ParseOutcome<StreamEvent> {
  const r = StreamEventSchema.safeParse(raw);
  return r.success
    ? { ok: true, value: r.data }
    : { ok: false, error: r.error.issues[0]?.message ?? "invalid event" };
}
