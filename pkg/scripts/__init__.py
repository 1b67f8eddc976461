# Scripts package 