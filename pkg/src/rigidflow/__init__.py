"""Rigid body moving in a viscous incompressible fluid with Navier slip on both boundaries."""
