"""
Visualizer: static plots of scenarios, training curves and motion-label usage.
"""
import matplotlib

matplotlib.use("Agg")

import geopandas as gpd
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Polygon as PolygonPatch
from shapely.geometry import LineString

from src.console import console
from src.kinematics import NUM_MOTION_BINS, NUM_MOTION_CONTROLS, box_corners
from src.scenario_model import AGENT_TYPES

AGENT_COLORS = {"vehicle": "#0496FF", "pedestrian": "#FF3A20", "cyclist": "#29339B"}
TL_COLORS = {0: "grey", 1: "green", 2: "gold", 3: "red"}


class Visualizer:
    @staticmethod
    def plot_scenario(scenario, title="Scenario", save_path=None, step=None):
        """
        Plot map polylines by semantic type, agent trajectories and the boxes at one step.

        Parameters:
        - scenario (ScenarioDescription): Scenario to draw.
        - title (str): Title of the plot.
        - save_path (str): Path to save the plot (optional).
        - step (int): Step whose boxes and light states are drawn; defaults to the last step.

        Returns:
        - str or None: The saved path.
        """
        try:
            step = scenario.num_steps - 1 if step is None else step
            fig, ax = plt.subplots(1, 1, figsize=(10, 8))

            if scenario.polylines:
                polylines = gpd.GeoDataFrame(
                    {"semantic_type": [p.semantic_type for p in scenario.polylines]},
                    geometry=[LineString(p.points[:, :2]) for p in scenario.polylines],
                )
                polylines.plot(ax=ax, column="semantic_type", categorical=True, linewidth=0.8, cmap="tab20",
                               legend=True, legend_kwds={"loc": "upper right", "fontsize": 7})

            for agent in scenario.agents:
                color = AGENT_COLORS[AGENT_TYPES[agent.agent_type]]
                track = agent.poses[agent.valid, :2]
                if len(track):
                    ax.plot(track[:, 0], track[:, 1], color=color, linewidth=1.0, alpha=0.6)
                if step < agent.num_steps and agent.valid[step]:
                    corners = box_corners(agent.poses[step], agent.shape)
                    ax.add_patch(PolygonPatch(corners, closed=True, facecolor=color, edgecolor="black",
                                              alpha=0.8, linewidth=0.5))

            for light in scenario.traffic_lights:
                state = int(light.states[min(step, len(light.states) - 1)])
                ax.scatter(*light.stop_point, color=TL_COLORS[state], marker="s", s=40, edgecolor="black", zorder=5)

            ax.set_title(title)
            ax.set_aspect("equal")
            ax.axis("off")

            if save_path:
                plt.savefig(save_path, dpi=150)
                console.print(f"[success]Scenario plot saved at {save_path}.[/success]", style="success")
            plt.close(fig)
            return save_path
        except Exception as e:
            console.print(f"[error]Error generating scenario plot: {e}[/error]", style="error")
            plt.close("all")
            return None

    @staticmethod
    def plot_loss_curve(history, title="Training loss", save_path=None):
        """
        Plot the total loss and the per-head losses of a training run.

        Parameters:
        - history (DataFrame): Columns step, total and one column per head.
        - title (str): Title of the plot.
        - save_path (str): Path to save the plot (optional).
        """
        try:
            fig, ax = plt.subplots(1, 1, figsize=(10, 6))
            heads = [c for c in history.columns if c not in ("step", "lr", "total")]
            ax.plot(history["step"], history["total"], color="black", linewidth=1.5, label="total")
            for head in heads:
                if history[head].abs().sum() > 0:
                    ax.plot(history["step"], history[head], linewidth=0.8, label=head)
            ax.set_yscale("log")
            ax.set_title(title)
            ax.set_xlabel("Step")
            ax.set_ylabel("Cross-entropy")
            ax.legend()

            if save_path:
                plt.savefig(save_path, dpi=150)
                console.print(f"[success]Loss curve saved at {save_path}.[/success]", style="success")
            plt.close(fig)
            return save_path
        except Exception as e:
            console.print(f"[error]Error generating loss curve: {e}[/error]", style="error")
            plt.close("all")
            return None

    @staticmethod
    def plot_label_histogram(labels, title="Motion label usage", save_path=None):
        """
        Heatmap of motion-label counts over the acceleration and yaw-rate grid. Start labels are ignored.

        Parameters:
        - labels (iterable of int): Motion labels.
        - title (str): Title of the plot.
        - save_path (str): Path to save the plot (optional).
        """
        try:
            labels = np.asarray(list(labels), dtype=np.int64)
            labels = labels[(labels >= 0) & (labels < NUM_MOTION_CONTROLS)]
            counts = np.bincount(labels, minlength=NUM_MOTION_CONTROLS).reshape(NUM_MOTION_BINS, NUM_MOTION_BINS)

            fig, ax = plt.subplots(1, 1, figsize=(8, 8))
            image = ax.imshow(np.log1p(counts), origin="lower", cmap="viridis")
            fig.colorbar(image, ax=ax, label="log(1 + count)")
            ax.set_title(title)
            ax.set_xlabel("Yaw-rate bin")
            ax.set_ylabel("Acceleration bin")

            if save_path:
                plt.savefig(save_path, dpi=150)
                console.print(f"[success]Label histogram saved at {save_path}.[/success]", style="success")
            plt.close(fig)
            return save_path
        except Exception as e:
            console.print(f"[error]Error generating label histogram: {e}[/error]", style="error")
            plt.close("all")
            return None
