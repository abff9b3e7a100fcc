"""Image geo-localization by an elected, reviewing swarm of agents.

Modules: ``geo`` (distances, gazetteer, metrics), ``agents`` (simulated and
HTTP backends), ``graph`` (collaboration network, election), ``discussion``
(the three-stage protocol), ``learn`` (selection model and training) and
``harness`` (datasets, synthetic worlds, evaluation, CLI).
"""

from .agents import AgentId, AgentProfile, HttpAgent, ImageRef, LocationAnswer, SimWorld, SimulatedAgent
from .discussion import DiscussionConfig, Verdict, run_debate, run_pipeline
from .geo import Gazetteer, GazetteerEntry, GeoBox, GeoPoint
from .graph import CollaborationGraph, ElectionVector
from .learn import SelectionModel, TrainConfig

__version__ = "0.1.0"

__all__ = ["AgentId", "AgentProfile", "CollaborationGraph", "DiscussionConfig", "ElectionVector", "Gazetteer",
           "GazetteerEntry", "GeoBox", "GeoPoint", "HttpAgent", "ImageRef", "LocationAnswer", "SelectionModel",
           "SimWorld", "SimulatedAgent", "TrainConfig", "Verdict", "run_debate", "run_pipeline"]
